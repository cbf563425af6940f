"""Synthetic light stage: point-light rig, skin BRDF, OLATs and environment maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import compute_vertex_normals
from .morphable import Camera, Mesh
from .raster import FrameBuffer, TextureMap, rasterize_geometry, sample_texture, surface_points_uv
from .raytrace import RayScene, build_scene, shade_points

FOUR_PI = 4.0 * np.pi


def fibonacci_directions(n: int) -> np.ndarray:
    """Fibonacci-spiral points on the unit sphere, z running from +1 to -1."""
    if n < 1:
        raise ValueError("need at least one direction")
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    i = np.arange(n)
    z = 1.0 - 2.0 * i / (n - 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class LightRig:
    directions: np.ndarray  # (N, 3) unit, camera/world frame
    intensities: np.ndarray | None = None

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if d.shape[0] < 1 or d.shape[1] != 3:
            raise ValueError("rig needs an (N, 3) direction array with N >= 1")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-9):
            raise ValueError("rig directions must be unit vectors")
        object.__setattr__(self, "directions", d)
        inten = np.ones(len(d)) if self.intensities is None else np.asarray(self.intensities, float)
        if inten.shape != (len(d),):
            raise ValueError("one intensity per light")
        object.__setattr__(self, "intensities", inten)

    @classmethod
    def fibonacci(cls, n: int = 150) -> LightRig:
        return cls(fibonacci_directions(n))

    def __len__(self) -> int:
        return len(self.directions)

    def rotated(self, r: np.ndarray) -> LightRig:
        return LightRig(self.directions @ np.asarray(r).T, self.intensities)


@dataclass(frozen=True)
class BRDFParams:
    diffuse_albedo: TextureMap
    specular_strength: float = 0.0
    shininess: float = 16.0
    ambient: float = 0.0

    def __post_init__(self):
        a = self.diffuse_albedo.data
        if a.min() < 0 or a.max() > 1:
            raise ValueError("albedo must lie in [0, 1]")
        if self.specular_strength < 0 or self.shininess < 1:
            raise ValueError("need k_s >= 0 and shininess >= 1")


@dataclass
class OLATSet:
    rig: LightRig
    images: np.ndarray  # (N, H, W, 3)
    space: str = "image"  # or "uv"
    camera_id: int = 0
    identity_id: int = 0
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != len(self.rig):
            raise ValueError(f"expected {len(self.rig)} images, got array {self.images.shape}")
        if self.space not in ("image", "uv"):
            raise ValueError(f"unknown OLAT space {self.space!r}")


# --------------------------------------------------------------------------
# shading


@dataclass
class SurfaceSamples:
    """Shading inputs at visible surface points, scattered into a raster."""
    mask: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    triangles: np.ndarray


def _interp_normals(vertex_normals, triangles, tid, bary):
    n = np.einsum("pk,pkd->pd", bary, vertex_normals[triangles[tid]])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(ln > 0, ln, 1.0)


def image_samples(mesh: Mesh, brdf: BRDFParams, camera: Camera,
                  fb: FrameBuffer | None = None) -> SurfaceSamples:
    if fb is None:
        fb = rasterize_geometry(mesh, camera)
    m = fb.mask
    tid, bary = fb.triangle_id[m], fb.barycentric[m]
    pts = np.einsum("pk,pkd->pd", bary, mesh.vertices[mesh.triangles[tid]])
    nrm = _interp_normals(compute_vertex_normals(mesh), mesh.triangles, tid, bary)
    alb = sample_texture(brdf.diffuse_albedo.data, fb.uv[m])
    return SurfaceSamples(m, pts, nrm, alb, tid)


def uv_samples(mesh: Mesh, brdf: BRDFParams, size) -> SurfaceSamples:
    mask, tid, bary, pts = surface_points_uv(mesh, size)
    nrm = _interp_normals(compute_vertex_normals(mesh), mesh.triangles, tid, bary)
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    uv = np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
    alb = sample_texture(brdf.diffuse_albedo.data, uv)
    return SurfaceSamples(mask, pts, nrm, alb, tid)


def _shade(samples: SurfaceSamples, brdf: BRDFParams, scene: RayScene, dirs, intensities,
           shadows: bool) -> np.ndarray:
    per_light = shade_points(scene, samples.points, samples.normals, samples.albedo,
                             samples.triangles, dirs, brdf.specular_strength, brdf.shininess,
                             brdf.ambient, shadows)
    per_light *= np.asarray(intensities, dtype=np.float64)[:, None, None]
    out = np.zeros((len(per_light),) + samples.mask.shape + (3,))
    out[:, samples.mask] = per_light
    return out


def shade_olat(mesh: Mesh, brdf: BRDFParams, light_dir, camera: Camera, shadows: bool = True,
               intensity: float = 1.0, scene: RayScene | None = None) -> np.ndarray:
    """Render one point light; returns an (H, W, 3) float64 image."""
    d = np.asarray(light_dir, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("light direction must be a unit vector")
    scene = scene or build_scene(mesh)
    return _shade(image_samples(mesh, brdf, camera), brdf, scene, d, [intensity], shadows)[0]


def shade_olats(mesh: Mesh, brdf: BRDFParams, rig: LightRig, camera: Camera,
                shadows: bool = True, space: str = "image", size=64,
                camera_id: int = 0, identity_id: int = 0) -> OLATSet:
    """All OLATs of a rig, rendered once per light in image or UV space."""
    scene = build_scene(mesh)
    if space == "image":
        s = image_samples(mesh, brdf, camera)
    else:
        s = uv_samples(mesh, brdf, size)
    imgs = _shade(s, brdf, scene, rig.directions, rig.intensities, shadows)
    return OLATSet(rig, imgs, space, camera_id, identity_id, s.mask)


def shade_lights(mesh: Mesh, brdf: BRDFParams, dirs, weights, camera: Camera,
                 shadows: bool = True) -> np.ndarray:
    """Image under several lights at once; ``weights`` is (L,) or (L, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    w = np.broadcast_to(w.reshape(len(dirs), -1), (len(dirs), 3))
    per = _shade(image_samples(mesh, brdf, camera), brdf, build_scene(mesh), dirs,
                 np.ones(len(dirs)), shadows)
    out = np.zeros(per.shape[1:])
    for l in range(len(dirs)):
        out += per[l] * w[l]
    return out


# --------------------------------------------------------------------------
# environment maps


@dataclass(frozen=True)
class EnvMap:
    data: np.ndarray  # (H, W, 3) linear radiance, equirectangular

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("environment map must be (H, W, 3)")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0:
            raise ValueError("environment radiance must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def constant(cls, value=1.0, width: int = 64, height: int = 32) -> EnvMap:
        return cls(np.full((height, width, 3), value, dtype=np.float64) * np.ones(3))


def direction_to_uv(dirs) -> np.ndarray:
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    u = (np.arctan2(d[:, 0], d[:, 2]) + np.pi) / (2 * np.pi)
    v = np.arccos(np.clip(d[:, 1], -1.0, 1.0)) / np.pi
    return np.stack([u, v], axis=1)


def uv_to_direction(uv) -> np.ndarray:
    uv = np.atleast_2d(uv)
    phi = uv[:, 0] * 2 * np.pi - np.pi
    theta = uv[:, 1] * np.pi
    s = np.sin(theta)
    return np.stack([s * np.sin(phi), np.cos(theta), s * np.cos(phi)], axis=1)


def sample_envmap(env: EnvMap, dirs) -> np.ndarray:
    """Bilinear equirectangular lookup; wraps horizontally, clamps at the poles."""
    single = np.ndim(dirs) == 1
    uv = direction_to_uv(dirs)
    h, w = env.height, env.width
    x = uv[:, 0] * w - 0.5
    y = np.clip(uv[:, 1] * h - 0.5, 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    y1 = np.minimum(y0 + 1, h - 1)
    c0, c1 = x0 % w, (x0 + 1) % w
    d = env.data
    out = ((1 - fx) * (1 - fy) * d[y0, c0] + fx * (1 - fy) * d[y0, c1]
           + (1 - fx) * fy * d[y1, c0] + fx * fy * d[y1, c1])
    return out[0] if single else out


def texel_solid_angles(height: int, width: int) -> np.ndarray:
    theta0 = np.arange(height) / height * np.pi
    theta1 = (np.arange(height) + 1) / height * np.pi
    band = (np.cos(theta0) - np.cos(theta1)) * 2 * np.pi / width
    return np.repeat(band[:, None], width, axis=1)


def project_env_to_lights(env: EnvMap, rig: LightRig, mode: str = "point") -> np.ndarray:
    """Per-light RGB weights.

    ``point``: radiance at each light direction times 4*pi/N.
    ``cells``: radiance integrated over each light's nearest-direction cell.
    """
    n = len(rig)
    if mode == "point":
        return sample_envmap(env, rig.directions) * (FOUR_PI / n)
    if mode != "cells":
        raise ValueError(f"unknown projection mode {mode!r}")
    h, w = env.height, env.width
    rows, cols = np.mgrid[0:h, 0:w]
    uv = np.stack([(cols.ravel() + 0.5) / w, (rows.ravel() + 0.5) / h], axis=1)
    owner = np.argmax(uv_to_direction(uv) @ rig.directions.T, axis=1)
    contrib = env.data.reshape(-1, 3) * texel_solid_angles(h, w).reshape(-1, 1)
    return np.stack([np.bincount(owner, weights=contrib[:, c], minlength=n) for c in range(3)], axis=1)


def procedural_envmap(seed: int, width: int = 64, height: int = 32, n_lights: int = 3,
                      sky=(0.25, 0.3, 0.4), ground=(0.08, 0.06, 0.05)) -> EnvMap:
    """Sky/ground gradient plus a few coloured Gaussian area lights."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:height, 0:width]
    uv = np.stack([(cols.ravel() + 0.5) / width, (rows.ravel() + 0.5) / height], axis=1)
    d = uv_to_direction(uv)
    t = (d[:, 1:2] + 1) / 2  # 1 at the top pole
    rad = t * np.asarray(sky) + (1 - t) * np.asarray(ground)
    for _ in range(n_lights):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        width_rad = rng.uniform(0.15, 0.4)
        colour = rng.uniform(0.5, 1.0, 3) * rng.uniform(2.0, 6.0)
        ang = np.arccos(np.clip(d @ c, -1, 1))
        rad = rad + np.exp(-0.5 * (ang / width_rad) ** 2)[:, None] * colour
    return EnvMap(rad.reshape(height, width, 3))


def relight_sum(olats: OLATSet | np.ndarray, weights) -> np.ndarray:
    """Channelwise weighted sum of OLAT images."""
    imgs = olats.images if isinstance(olats, OLATSet) else np.asarray(olats)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = np.repeat(w[:, None], 3, axis=1)
    if w.shape[0] != imgs.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for {imgs.shape[0]} OLATs")
    return np.einsum("nhwc,nc->hwc", imgs, w)
