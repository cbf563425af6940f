"""Shadow rays: watertight ray/triangle tests with an optional BVH."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import face_normals
from .morphable import Mesh

BVH_THRESHOLD = 1000
LEAF_SIZE = 4


@dataclass(frozen=True)
class RayScene:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    unit_normals: np.ndarray  # (T, 3) face normals
    radius: float
    # flattened BVH; empty arrays mean brute force
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def epsilon(self) -> float:
        return 1e-3 * self.radius

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    @property
    def uses_bvh(self) -> bool:
        return len(self.lo) > 0


def _build_bvh(v0, v1, v2, leaf_size=LEAF_SIZE):
    tmin = np.minimum(np.minimum(v0, v1), v2)
    tmax = np.maximum(np.maximum(v0, v1), v2)
    cent = (tmin + tmax) / 2
    order = np.arange(len(v0))
    lo, hi, left, right, start, count = [], [], [], [], [], []
    # iterative median split; node i stores [start, start+count) of ``order``
    stack = [(0, len(v0), -1, 0)]
    while stack:
        s, e, parent, side = stack.pop()
        node = len(lo)
        if parent >= 0:
            (left if side == 0 else right)[parent] = node
        idx = order[s:e]
        pad = 1e-9 * (1.0 + np.abs(tmax[idx]).max())
        lo.append(tmin[idx].min(axis=0) - pad)
        hi.append(tmax[idx].max(axis=0) + pad)
        left.append(-1)
        right.append(-1)
        if e - s <= leaf_size:
            start.append(s)
            count.append(e - s)
            continue
        start.append(s)
        count.append(0)
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = idx[np.argsort(c[:, axis], kind="stable")]
        order[s:e] = srt
        mid = (s + e) // 2
        stack.append((mid, e, node, 1))
        stack.append((s, mid, node, 0))
    return (np.array(lo), np.array(hi), np.array(left, np.int64), np.array(right, np.int64),
            np.array(start, np.int64), np.array(count, np.int64), order.astype(np.int64))


def build_scene(mesh: Mesh, use_bvh: bool | None = None) -> RayScene:
    v = np.ascontiguousarray(mesh.vertices, dtype=np.float64)
    t = mesh.triangles
    v0, v1, v2 = (np.ascontiguousarray(v[t[:, i]]) for i in range(3))
    fn = face_normals(v, t)
    ln = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = fn / np.where(ln > 0, ln, 1.0)
    centre = (v.max(axis=0) + v.min(axis=0)) / 2
    radius = float(np.linalg.norm(v - centre, axis=1).max()) if len(v) else 1.0
    if use_bvh is None:
        use_bvh = len(t) > BVH_THRESHOLD
    if use_bvh:
        bvh = _build_bvh(v0, v1, v2)
    else:
        bvh = (np.zeros((0, 3)), np.zeros((0, 3)), *(np.zeros(0, np.int64) for _ in range(5)))
    return RayScene(v0, v1, v2, fn, radius, *bvh)


@numba.njit(cache=True)
def _hit_triangle(ox, oy, oz, dx, dy, dz, a, b, c):
    """Watertight ray/triangle test; grazing rays (zero determinant) miss."""
    d = (dx, dy, dz)
    ad = (abs(dx), abs(dy), abs(dz))
    kz = 0
    if ad[1] > ad[kz]:
        kz = 1
    if ad[2] > ad[kz]:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    o = (ox, oy, oz)
    ax_, ay_, az_ = a[kx] - o[kx], a[ky] - o[ky], a[kz] - o[kz]
    bx_, by_, bz_ = b[kx] - o[kx], b[ky] - o[ky], b[kz] - o[kz]
    cx_, cy_, cz_ = c[kx] - o[kx], c[ky] - o[ky], c[kz] - o[kz]
    ax = ax_ - sx * az_
    ay = ay_ - sy * az_
    bx = bx_ - sx * bz_
    by = by_ - sy * bz_
    cx = cx_ - sx * cz_
    cy = cy_ - sy * cz_
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0 or v < 0 or w < 0) and (u > 0 or v > 0 or w > 0):
        return False
    det = u + v + w
    if det == 0.0:
        return False
    t = u * sz * az_ + v * sz * bz_ + w * sz * cz_
    if det > 0:
        return t > 0
    return t < 0


@numba.njit(cache=True)
def _box_hit(ox, oy, oz, dx, dy, dz, lo, hi):
    tmin = 0.0
    tmax = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return False
            continue
        t1 = (lo[k] - o[k]) / d[k]
        t2 = (hi[k] - o[k]) / d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
        if tmin > tmax:
            return False
    return True


@numba.njit(cache=True)
def _occluded(ox, oy, oz, dx, dy, dz, skip, v0, v1, v2, lo, hi, left, right, start, count, order):
    if lo.shape[0] == 0:
        for t in range(v0.shape[0]):
            if t != skip and _hit_triangle(ox, oy, oz, dx, dy, dz, v0[t], v1[t], v2[t]):
                return True
        return False
    stack = np.empty(128, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(ox, oy, oz, dx, dy, dz, lo[node], hi[node]):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                t = order[k]
                if t != skip and _hit_triangle(ox, oy, oz, dx, dy, dz, v0[t], v1[t], v2[t]):
                    return True
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return False


def _scene_args(scene: RayScene):
    return (scene.v0, scene.v1, scene.v2, scene.lo, scene.hi, scene.left, scene.right,
            scene.start, scene.count, scene.order)


def shadow_test(scene: RayScene | Mesh, point, light_dir, source_triangle: int = -1,
                normal=None) -> bool:
    """True when the ray from ``point`` (offset along ``normal``) toward
    ``light_dir`` hits a triangle other than ``source_triangle``.

    ``normal`` defaults to the source triangle's face normal, turned toward
    the light.
    """
    if isinstance(scene, Mesh):
        scene = build_scene(scene)
    d = np.asarray(light_dir, dtype=np.float64)
    p = np.asarray(point, dtype=np.float64)
    if normal is None:
        if source_triangle >= 0:
            normal = scene.unit_normals[source_triangle]
            if normal @ d < 0:
                normal = -normal
        else:
            normal = np.zeros(3)
    o = p + scene.epsilon * np.asarray(normal, dtype=np.float64)
    return bool(_occluded(o[0], o[1], o[2], d[0], d[1], d[2], int(source_triangle),
                          *_scene_args(scene)))


@numba.njit(parallel=True, cache=True)
def _shade_kernel(points, normals, albedo, src, dirs, ks, shininess, ambient, shadows, eps,
                  v0, v1, v2, lo, hi, left, right, start, count, order):
    """Per-light radiance, shape (L, P, 3)."""
    n_l = dirs.shape[0]
    n_p = points.shape[0]
    out = np.zeros((n_l, n_p, 3))
    for p in numba.prange(n_p):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        nx, ny, nz = normals[p, 0], normals[p, 1], normals[p, 2]
        vl = np.sqrt(px * px + py * py + pz * pz)
        vx, vy, vz = -px / vl, -py / vl, -pz / vl
        for l in range(n_l):
            wx, wy, wz = dirs[l, 0], dirs[l, 1], dirs[l, 2]
            ndl = nx * wx + ny * wy + nz * wz
            val = 0.0
            spec = 0.0
            if ndl > 0:
                lit = True
                if shadows:
                    lit = not _occluded(px + eps * nx, py + eps * ny, pz + eps * nz,
                                        wx, wy, wz, src[p], v0, v1, v2, lo, hi, left, right,
                                        start, count, order)
                if lit:
                    val = ndl
                    hx, hy, hz = wx + vx, wy + vy, wz + vz
                    hl = np.sqrt(hx * hx + hy * hy + hz * hz)
                    if ks > 0 and hl > 0:
                        ndh = (nx * hx + ny * hy + nz * hz) / hl
                        if ndh > 0:
                            spec = ks * ndh ** shininess
            for c in range(3):
                out[l, p, c] = albedo[p, c] * (val + ambient) + spec
    return out


def shade_points(scene: RayScene, points, normals, albedo, source_triangles, dirs,
                 specular_strength=0.0, shininess=1.0, ambient=0.0, shadows=True) -> np.ndarray:
    """Lambert + Blinn radiance at camera-space surface points for each light.

    Returns (L, P, 3) with unit light intensity; the camera sits at the origin.
    """
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    return _shade_kernel(np.ascontiguousarray(points, dtype=np.float64),
                         np.ascontiguousarray(normals, dtype=np.float64),
                         np.ascontiguousarray(albedo, dtype=np.float64),
                         np.ascontiguousarray(source_triangles, dtype=np.int64), dirs,
                         float(specular_strength), float(shininess), float(ambient),
                         bool(shadows), scene.epsilon, *_scene_args(scene))
