"""Software rasterizer with a texture-space adjoint.

Pixel (row i, col j) has its centre at image coordinates (j + 0.5, i + 0.5);
texel (r, c) of an H x W texture has its centre at uv ((c + 0.5)/W, (r + 0.5)/H).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from .geometry import face_normals
from .morphable import Camera, Mesh

NO_TRIANGLE = -1
NEAR = 1e-6


@dataclass(frozen=True)
class TextureMap:
    data: np.ndarray  # (H, W, C) float32
    valid_mask: np.ndarray  # (H, W) bool
    kind: str = "radiance"  # or "normal"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("texture data must be (H, W, C)")
        if self.valid_mask.shape != self.data.shape[:2]:
            raise ValueError("valid_mask must match texture size")
        if self.kind not in ("radiance", "normal"):
            raise ValueError(f"unknown texture kind {self.kind!r}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def constant(cls, value, size: int | tuple[int, int] = 512) -> TextureMap:
        h, w = (size, size) if np.isscalar(size) else size
        value = np.broadcast_to(np.asarray(value, dtype=np.float32), (3,))
        return cls(np.tile(value, (h, w, 1)).astype(np.float32), np.ones((h, w), dtype=bool))


@dataclass
class FrameBuffer:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), +inf where empty
    mask: np.ndarray  # (H, W) bool
    triangle_id: np.ndarray  # (H, W) int, NO_TRIANGLE where empty
    barycentric: np.ndarray  # (H, W, 3) perspective-correct
    uv: np.ndarray  # (H, W, 2) interpolated texture coordinates
    texture_shape: tuple[int, int] | None = None
    filter: str = "bilinear"
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(parallel=True, cache=True)
def _raster_kernel(sx, sy, inv_z, tris, height, width, band):
    depth = np.full((height, width), np.inf)
    tid = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    n_bands = (height + band - 1) // band
    for b in numba.prange(n_bands):
        r0 = b * band
        r1 = min(height, r0 + band)
        for t in range(tris.shape[0]):
            i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
            if inv_z[i0] <= 0 or inv_z[i1] <= 0 or inv_z[i2] <= 0:
                continue
            x0, y0, x1, y1, x2, y2 = sx[i0], sy[i0], sx[i1], sy[i1], sx[i2], sy[i2]
            area = _edge(x0, y0, x1, y1, x2, y2)
            if area == 0.0:
                continue
            ymin = max(r0, int(np.floor(min(y0, y1, y2) - 0.5)))
            ymax = min(r1 - 1, int(np.ceil(max(y0, y1, y2) - 0.5)))
            xmin = max(0, int(np.floor(min(x0, x1, x2) - 0.5)))
            xmax = min(width - 1, int(np.ceil(max(x0, x1, x2) - 0.5)))
            for i in range(ymin, ymax + 1):
                py = i + 0.5
                for j in range(xmin, xmax + 1):
                    px = j + 0.5
                    w0 = _edge(x1, y1, x2, y2, px, py) / area
                    w1 = _edge(x2, y2, x0, y0, px, py) / area
                    w2 = _edge(x0, y0, x1, y1, px, py) / area
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                    iz = w0 * inv_z[i0] + w1 * inv_z[i1] + w2 * inv_z[i2]
                    z = 1.0 / iz
                    # lower triangle index wins ties
                    if z < depth[i, j] or (z == depth[i, j] and t < tid[i, j]):
                        depth[i, j] = z
                        tid[i, j] = t
                        bary[i, j, 0] = w0 * inv_z[i0] / iz
                        bary[i, j, 1] = w1 * inv_z[i1] / iz
                        bary[i, j, 2] = w2 * inv_z[i2] / iz
    return depth, tid, bary


@numba.njit(cache=True)
def _atlas_kernel(px, py, tris, height, width):
    """Affine rasterization of the UV chart; later triangles overwrite earlier
    ones. Returns triangle ids, barycentrics and the number of texels strictly
    inside two or more triangles."""
    tid = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    inside = np.zeros((height, width), np.int64)
    overlaps = 0
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0, x1, y1, x2, y2 = px[i0], py[i0], px[i1], py[i1], px[i2], py[i2]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        ymin = max(0, int(np.floor(min(y0, y1, y2) - 0.5)))
        ymax = min(height - 1, int(np.ceil(max(y0, y1, y2) - 0.5)))
        xmin = max(0, int(np.floor(min(x0, x1, x2) - 0.5)))
        xmax = min(width - 1, int(np.ceil(max(x0, x1, x2) - 0.5)))
        for i in range(ymin, ymax + 1):
            for j in range(xmin, xmax + 1):
                w0 = _edge(x1, y1, x2, y2, j + 0.5, i + 0.5) / area
                w1 = _edge(x2, y2, x0, y0, j + 0.5, i + 0.5) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0 or w1 < 0 or w2 < -1e-12:
                    continue
                tid[i, j] = t
                bary[i, j, 0] = w0
                bary[i, j, 1] = w1
                bary[i, j, 2] = max(w2, 0.0)
                if w0 > 1e-9 and w1 > 1e-9 and w2 > 1e-9:
                    inside[i, j] += 1
                    if inside[i, j] == 2:
                        overlaps += 1
    return tid, bary, overlaps


# --------------------------------------------------------------------------
# texture sampling


def texel_taps(uv: np.ndarray, height: int, width: int, filter: str = "bilinear"):
    """Flat texel indices and weights used to sample at ``uv`` (P, 2).

    Bilinear with clamp-to-edge returns (P, 4) arrays; nearest returns (P, 1).
    """
    x = uv[:, 0] * width - 0.5
    y = uv[:, 1] * height - 0.5
    if filter == "nearest":
        c = np.clip(np.floor(x + 0.5), 0, width - 1).astype(np.int64)
        r = np.clip(np.floor(y + 0.5), 0, height - 1).astype(np.int64)
        return (r * width + c)[:, None], np.ones((len(uv), 1))
    if filter != "bilinear":
        raise ValueError(f"unknown filter {filter!r}")
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    c0, c1 = np.clip(x0, 0, width - 1), np.clip(x0 + 1, 0, width - 1)
    r0, r1 = np.clip(y0, 0, height - 1), np.clip(y0 + 1, 0, height - 1)
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def sample_texture(data: np.ndarray, uv: np.ndarray, filter: str = "bilinear") -> np.ndarray:
    h, w, c = data.shape
    idx, wt = texel_taps(uv, h, w, filter)
    flat = data.reshape(-1, c).astype(np.float64)
    return np.einsum("pk,pkc->pc", wt, flat[idx])


def sample_image(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (x right, y down)."""
    h, w = image.shape[:2]
    uv = np.stack([xy[:, 0] / w, xy[:, 1] / h], axis=1)
    return sample_texture(image.reshape(h, w, -1), uv)


# --------------------------------------------------------------------------
# image-space rendering


def _screen(mesh: Mesh, camera: Camera):
    v = mesh.vertices
    z = v[:, 2]
    inv_z = np.where(z > NEAR, 1.0 / np.where(z > NEAR, z, 1.0), -1.0)
    cx, cy = camera.principal_point
    sx = cx + camera.focal * v[:, 0] * inv_z
    sy = cy + camera.focal * v[:, 1] * inv_z
    return sx, sy, inv_z


def rasterize_geometry(mesh: Mesh, camera: Camera, band: int = 16) -> FrameBuffer:
    """Visibility pass: depth, triangle ids, barycentrics and uv (no colour)."""
    if mesh.space != "camera":
        raise ValueError("rasterize expects a camera-space mesh")
    sx, sy, inv_z = _screen(mesh, camera)
    tris = np.ascontiguousarray(mesh.triangles, dtype=np.int64)
    depth, tid, bary = _raster_kernel(sx, sy, inv_z, tris, camera.height, camera.width, band)
    mask = tid >= 0
    uv = np.zeros((camera.height, camera.width, 2))
    if mask.any():
        corners = mesh.uv_coords[tris[tid[mask]]]  # (P, 3, 2)
        uv[mask] = np.einsum("pk,pkd->pd", bary[mask], corners)
    color = np.zeros((camera.height, camera.width, 3), dtype=np.float32)
    return FrameBuffer(color, depth, mask, tid, bary, uv)


def rasterize(mesh: Mesh, camera: Camera, texture: TextureMap,
              filter: str = "bilinear", fb: FrameBuffer | None = None) -> FrameBuffer:
    """Z-buffered render of ``mesh`` textured with ``texture``.

    A precomputed visibility pass ``fb`` may be passed to re-shade the same
    geometry with a different texture.
    """
    if fb is None:
        fb = rasterize_geometry(mesh, camera)
    color = np.zeros(fb.mask.shape + (texture.data.shape[2],), dtype=np.float32)
    if fb.mask.any():
        color[fb.mask] = sample_texture(texture.data, fb.uv[fb.mask], filter)
    return FrameBuffer(color, fb.depth, fb.mask, fb.triangle_id, fb.barycentric, fb.uv,
                       (texture.height, texture.width), filter)


def render_texture(fb: FrameBuffer, texture_data: np.ndarray, filter: str | None = None) -> np.ndarray:
    """Forward map of :func:`backprop_texture`: sample ``texture_data`` through
    a fixed visibility pass, float64, zeros outside the mask."""
    filter = filter or fb.filter
    out = np.zeros(fb.mask.shape + (texture_data.shape[2],))
    if fb.mask.any():
        out[fb.mask] = sample_texture(texture_data, fb.uv[fb.mask], filter)
    return out


def backprop_texture(fb: FrameBuffer, grad_image: np.ndarray, texture_dims,
                     filter: str | None = None) -> np.ndarray:
    """Adjoint of the fixed-visibility texture lookup.

    Scatters each masked pixel's upstream gradient into the texels it sampled,
    weighted by the filter coefficients. Returns an (H_t, W_t, C) array.
    """
    filter = filter or fb.filter
    th, tw = texture_dims[:2]
    if fb.texture_shape is not None and tuple(fb.texture_shape) != (th, tw):
        raise ValueError(f"texture dims {(th, tw)} do not match render {fb.texture_shape}")
    g = np.asarray(grad_image, dtype=np.float64)
    if g.shape[:2] != fb.mask.shape:
        raise ValueError(f"gradient image {g.shape[:2]} does not match framebuffer {fb.mask.shape}")
    g = g.reshape(g.shape[0], g.shape[1], -1)
    channels = g.shape[2]
    out = np.zeros((th * tw, channels))
    if fb.mask.any():
        idx, wt = texel_taps(fb.uv[fb.mask], th, tw, filter)
        gp = g[fb.mask]
        flat_idx = idx.ravel()
        for c in range(channels):
            out[:, c] = np.bincount(flat_idx, weights=(wt * gp[:, c:c + 1]).ravel(), minlength=th * tw)
    return out.reshape(th, tw, channels)


# --------------------------------------------------------------------------
# UV-space rendering


def _array_key(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


_ATLAS_STORE: dict[str, tuple[np.ndarray, np.ndarray]] = {}


@lru_cache(maxsize=32)
def _atlas_cached(key: str, height: int, width: int):
    uv, tris = _ATLAS_STORE[key]
    px = np.ascontiguousarray(uv[:, 0] * width)
    py = np.ascontiguousarray(uv[:, 1] * height)
    tid, bary, overlaps = _atlas_kernel(px, py, np.ascontiguousarray(tris, dtype=np.int64),
                                        height, width)
    if overlaps:
        raise ValueError(f"UV atlas has overlapping charts ({overlaps} texels covered twice)")
    tid.setflags(write=False)
    bary.setflags(write=False)
    return tid, bary


def atlas_raster(uv_coords: np.ndarray, triangles: np.ndarray, size) -> tuple[np.ndarray, np.ndarray]:
    """Texel -> (triangle id, barycentric) for the UV chart; validates overlap."""
    h, w = (size, size) if np.isscalar(size) else size
    key = _array_key(uv_coords, triangles)
    _ATLAS_STORE[key] = (uv_coords, triangles)
    return _atlas_cached(key, int(h), int(w))


def dilate(data: np.ndarray, mask: np.ndarray, steps: int = 2) -> np.ndarray:
    """Fill ``steps`` texels of gutter around ``mask`` with neighbour averages."""
    out = data.copy()
    filled = mask.copy()
    h, w = mask.shape
    for _ in range(steps):
        acc = np.zeros_like(out)
        cnt = np.zeros((h, w))
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)):
            src = np.zeros_like(filled)
            shifted = np.zeros_like(out)
            ys = slice(max(0, dy), h + min(0, dy))
            yd = slice(max(0, -dy), h + min(0, -dy))
            xs = slice(max(0, dx), w + min(0, dx))
            xd = slice(max(0, -dx), w + min(0, -dx))
            src[yd, xd] = filled[ys, xs]
            shifted[yd, xd] = out[ys, xs]
            acc += shifted * src[..., None]
            cnt += src
        grow = (~filled) & (cnt > 0)
        out[grow] = acc[grow] / cnt[grow, None]
        filled = filled | grow
    return out


def render_uv_attribute(mesh: Mesh, attribute: np.ndarray, size=512,
                        normalize: bool = False, gutter: int = 2) -> TextureMap:
    """Interpolate a per-vertex attribute over the UV chart.

    With ``normalize`` the result is treated as a unit-normal map.
    """
    attribute = np.asarray(attribute, dtype=np.float64)
    if attribute.shape[0] != mesh.n_vertices:
        raise ValueError(f"attribute has {attribute.shape[0]} rows for {mesh.n_vertices} vertices")
    attribute = attribute.reshape(mesh.n_vertices, -1)
    tid, bary = atlas_raster(mesh.uv_coords, mesh.triangles, size)
    mask = tid >= 0
    out = np.zeros(tid.shape + (attribute.shape[1],))
    corners = attribute[mesh.triangles[tid[mask]]]
    out[mask] = np.einsum("pk,pkc->pc", bary[mask], corners)
    if normalize:
        n = np.linalg.norm(out[mask], axis=1, keepdims=True)
        out[mask] = out[mask] / np.where(n > 0, n, 1.0)
    if gutter:
        out = dilate(out, mask, gutter)
        if normalize:
            n = np.linalg.norm(out, axis=2, keepdims=True)
            out = np.where(n > 0, out / np.where(n > 0, n, 1.0), 0.0)
    return TextureMap(out.astype(np.float32), mask, "normal" if normalize else "radiance")


def surface_points_uv(mesh: Mesh, size=512):
    """Per covered texel: triangle id and 3D surface point (mesh space)."""
    tid, bary = atlas_raster(mesh.uv_coords, mesh.triangles, size)
    mask = tid >= 0
    pts = np.einsum("pk,pkd->pd", bary[mask], mesh.vertices[mesh.triangles[tid[mask]]])
    return mask, tid[mask], bary[mask], pts


def unproject_to_uv(image: np.ndarray, mesh: Mesh, camera: Camera, size=512,
                    fb: FrameBuffer | None = None, depth_tol: float = 1e-2,
                    gutter: int = 2) -> TextureMap:
    """Pull image colours back onto the UV chart.

    A texel is valid when its surface point faces the camera, projects inside
    the image with its whole bilinear footprint on rendered pixels, and is not
    behind the z-buffer by more than ``depth_tol`` (relative).
    """
    image = np.asarray(image)
    if image.shape[:2] != (camera.height, camera.width):
        raise ValueError("image size does not match camera")
    if fb is None:
        fb = rasterize_geometry(mesh, camera)
    mask, tid, _, pts = surface_points_uv(mesh, size)
    fn = face_normals(mesh.vertices, mesh.triangles)[tid]
    ok = (np.einsum("pd,pd->p", fn, pts) < 0) & (pts[:, 2] > NEAR)
    z = np.where(ok, pts[:, 2], 1.0)
    cx, cy = camera.principal_point
    x = cx + camera.focal * pts[:, 0] / z
    y = cy + camera.focal * pts[:, 1] / z
    h, w = camera.height, camera.width
    ok &= (x >= 0.5) & (x <= w - 0.5) & (y >= 0.5) & (y <= h - 0.5)
    xs = np.where(ok, x, 0.5)
    ys = np.where(ok, y, 0.5)
    # every pixel of the bilinear footprint must be covered and not occlude the point
    x0 = np.clip(np.floor(xs - 0.5).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(ys - 0.5).astype(np.int64), 0, h - 1)
    for dy in (0, 1):
        for dx in (0, 1):
            r, c = np.minimum(y0 + dy, h - 1), np.minimum(x0 + dx, w - 1)
            ok &= fb.mask[r, c]
            ok &= z <= fb.depth[r, c] * (1.0 + depth_tol)
    data = np.zeros(mask.shape + (image.reshape(h, w, -1).shape[2],))
    vals = np.zeros((len(pts), data.shape[2]))
    if ok.any():
        vals[ok] = sample_image(image, np.stack([xs[ok], ys[ok]], axis=1))
    valid = np.zeros(mask.shape, dtype=bool)
    valid[mask] = ok
    data[mask] = vals * ok[:, None]
    if gutter:
        data = dilate(data, valid, gutter)
    return TextureMap(data.astype(np.float32), valid)
