"""Linear morphable face model: data types, a procedural synthetic model and
the RFMM binary format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RFMM_MAGIC = b"RFMM"
N_LANDMARKS = 66
N_CONTOUR = 17


@dataclass(frozen=True)
class MorphableModel:
    """Mean mesh plus std-dev scaled identity/expression bases.

    ``mean_vertices`` is flat (3N,) in object-space millimetres, laid out as
    x0, y0, z0, x1, ... . Object space follows the camera convention: x right,
    y down, the face looking toward -z.
    """

    mean_vertices: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    triangles: np.ndarray
    uv_coords: np.ndarray
    landmark_indices: np.ndarray
    contour_mask: np.ndarray

    def __post_init__(self):
        n3 = self.mean_vertices.shape[0]
        if n3 % 3:
            raise ValueError("mean_vertices length must be a multiple of 3")
        n = n3 // 3
        if self.id_basis.ndim != 2 or self.id_basis.shape[0] != n3:
            raise ValueError(f"id_basis must be (3N, m_i), got {self.id_basis.shape}")
        if self.exp_basis.ndim != 2 or self.exp_basis.shape[0] != n3:
            raise ValueError(f"exp_basis must be (3N, m_e), got {self.exp_basis.shape}")
        tri = self.triangles
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if tri.size and (tri.min() < 0 or tri.max() >= n):
            raise ValueError("triangle index out of range")
        if self.uv_coords.shape != (n, 2):
            raise ValueError("uv_coords must be (N, 2)")
        if np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            raise ValueError("uv_coords must lie in [0, 1]^2")
        lm = self.landmark_indices
        if lm.min() < 0 or lm.max() >= n:
            raise ValueError("landmark index out of range")
        if len(np.unique(lm)) != len(lm):
            raise ValueError("landmark indices must be distinct")
        if self.contour_mask.shape != lm.shape:
            raise ValueError("contour_mask must match landmark_indices")

    @property
    def n_vertices(self) -> int:
        return self.mean_vertices.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def contour_landmarks(self) -> np.ndarray:
        """Positions (into the landmark list) of the sliding contour points."""
        return np.flatnonzero(self.contour_mask)


@dataclass(frozen=True)
class FaceParams:
    alpha: np.ndarray
    beta: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 600.0]))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation must be a unit quaternion (w, x, y, z)")

    @classmethod
    def neutral(cls, model: MorphableModel, translation=(0.0, 0.0, 600.0)) -> FaceParams:
        return cls(np.zeros(model.n_id), np.zeros(model.n_exp),
                   np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(translation, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "alpha": [float(x) for x in self.alpha],
            "beta": [float(x) for x in self.beta],
            "rotation": [float(x) for x in self.rotation],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> FaceParams:
        q = np.asarray(d["rotation"], dtype=np.float64)
        return cls(np.asarray(d["alpha"], dtype=np.float64),
                   np.asarray(d["beta"], dtype=np.float64),
                   q / np.linalg.norm(q),
                   np.asarray(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with identity extrinsics; image y points down."""

    focal: float
    principal_point: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def default(cls, width: int = 128, height: int | None = None) -> Camera:
        height = width if height is None else height
        # head of ~170 mm width at 600 mm fills roughly 80% of the frame
        return cls(focal=3.2 * width, principal_point=(width / 2.0, height / 2.0),
                   width=width, height=height)

    def to_dict(self) -> dict:
        return {"focal": self.focal, "principal_point": list(self.principal_point),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(float(d["focal"]), tuple(float(x) for x in d["principal_point"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (N, 3)
    triangles: np.ndarray
    uv_coords: np.ndarray
    space: str = "object"

    def __post_init__(self):
        if self.space not in ("object", "camera"):
            raise ValueError(f"unknown space tag {self.space!r}")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


# --------------------------------------------------------------------------
# procedural synthetic model


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with outward counter-clockwise faces."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _angular(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Face-centred angles: azimuth (right positive) and elevation (down positive)."""
    az = np.arctan2(d[:, 0], -d[:, 2])
    el = np.arcsin(np.clip(d[:, 1], -1.0, 1.0))
    return az, el


def _direction(az: float, el: float) -> np.ndarray:
    return np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])


def _bump(az, el, a0, e0, sa, se):
    return np.exp(-0.5 * (((az - a0) / sa) ** 2 + ((el - e0) / se) ** 2))


def _landmark_targets() -> list[tuple[float, float]]:
    pts = []
    # jaw contour, ear to ear through the chin
    for psi in np.linspace(-np.pi / 2, np.pi / 2, N_CONTOUR):
        pts.append((0.8 * np.sin(psi), -0.05 + 0.72 * np.cos(psi)))
    for side in (-1, 1):  # brows
        for a in np.linspace(0.5, 0.12, 5):
            pts.append((side * a, -0.40 + 0.1 * (a - 0.3) ** 2))
    for e in np.linspace(-0.26, 0.02, 4):  # nose bridge
        pts.append((0.0, e))
    for a in (-0.14, -0.07, 0.0, 0.07, 0.14):  # nostrils
        pts.append((a, 0.17))
    for side in (-1, 1):  # eyes
        for ang in np.linspace(0, 2 * np.pi, 6, endpoint=False):
            pts.append((side * 0.3 + 0.1 * np.cos(ang), -0.16 + 0.05 * np.sin(ang)))
    for ang in np.linspace(0, 2 * np.pi, 12, endpoint=False):  # outer lips
        pts.append((0.24 * np.cos(ang), 0.43 + 0.1 * np.sin(ang)))
    for ang in np.linspace(0, 2 * np.pi, 6, endpoint=False):  # inner lips
        pts.append((0.12 * np.cos(ang), 0.43 + 0.035 * np.sin(ang)))
    assert len(pts) == N_LANDMARKS
    return pts


def _smooth_fields(dirs: np.ndarray, count: int, rng: np.random.Generator,
                   degree: int = 3) -> np.ndarray:
    """Random smooth 3D displacement fields from low-order polynomials on S^2."""
    x, y, z = dirs.T
    monos = [x ** i * y ** j * z ** k
             for i in range(degree + 1) for j in range(degree + 1 - i)
             for k in range(degree + 1 - i - j) if i + j + k > 0]
    feats = np.stack(monos, axis=1)
    feats -= feats.mean(axis=0)
    feats /= feats.std(axis=0) + 1e-12
    out = np.empty((dirs.shape[0], 3, count))
    for c in range(count):
        coef = rng.normal(size=(feats.shape[1], 3)) / np.arange(1, feats.shape[1] + 1)[:, None] ** 0.5
        out[:, :, c] = feats @ coef
    return out


def _remove_similarity(fields: np.ndarray, verts: np.ndarray) -> np.ndarray:
    n = len(verts)
    c = verts - verts.mean(axis=0)
    gens = [np.tile(e, (n, 1)) for e in np.eye(3)]
    gens += [np.cross(e, c) for e in np.eye(3)] + [c]
    g = np.stack([x.ravel() for x in gens], axis=1)
    flat = fields.reshape(3 * n, -1)
    flat = flat - g @ np.linalg.lstsq(g, flat, rcond=None)[0]
    return flat / np.sqrt(3.0 * np.mean(flat ** 2, axis=0))


def synthetic_model(level: int = 4, n_id: int = 8, n_exp: int = 4, seed: int = 7,
                    max_angle: float = np.deg2rad(120.0)) -> MorphableModel:
    """Procedural head: an icosphere cap with nose, brows, eye sockets and lips.

    Vertices farther than ``max_angle`` from the frontal direction are dropped,
    leaving an open mask whose azimuthal-equidistant UV chart is one disk.
    """
    rng = np.random.default_rng(seed)
    dirs, faces = icosphere(level)
    theta = np.arccos(np.clip(-dirs[:, 2], -1.0, 1.0))
    keep = theta <= max_angle
    faces = faces[np.all(keep[faces], axis=1)]
    used = np.unique(faces)
    remap = -np.ones(len(dirs), dtype=np.int64)
    remap[used] = np.arange(len(used))
    dirs, theta, faces = dirs[used], theta[used], remap[faces]

    az, el = _angular(dirs)
    semi = np.array([78.0, 98.0, 88.0])
    rad = (22.0 * _bump(az, el, 0.0, 0.08, 0.11, 0.2)  # nose
           + 6.0 * _bump(az, el, 0.0, -0.3, 0.5, 0.07)  # brow ridge
           - 9.0 * _bump(az, el, -0.3, -0.16, 0.12, 0.08)  # eye sockets
           - 9.0 * _bump(az, el, 0.3, -0.16, 0.12, 0.08)
           + 5.0 * _bump(az, el, 0.0, 0.43, 0.2, 0.07)  # lips
           + 4.0 * _bump(az, el, 0.0, 0.68, 0.25, 0.08))  # chin
    verts = dirs * semi + rad[:, None] * dirs

    lower = 1.0 / (1.0 + np.exp(-(el - 0.15) / 0.08))
    id_fields = _smooth_fields(dirs, n_id, rng)
    exp_fields = _smooth_fields(dirs, n_exp, rng) * lower[:, None, None]
    # bases carry no translation, rotation or scale (Procrustes-aligned), and
    # one unit coefficient moves vertices by 3 mm (id) / 2 mm (exp) RMS
    id_basis = _remove_similarity(id_fields, verts) * 3.0
    exp_basis = _remove_similarity(exp_fields, verts) * 2.0

    rho = np.hypot(dirs[:, 0], dirs[:, 1])
    safe = np.where(rho > 1e-12, rho, 1.0)
    r = 0.49 * theta / max_angle
    uv = np.stack([0.5 + r * np.where(rho > 1e-12, dirs[:, 0] / safe, 0.0),
                   0.5 + r * np.where(rho > 1e-12, dirs[:, 1] / safe, 0.0)], axis=1)

    chosen: list[int] = []
    for a, e in _landmark_targets():
        score = dirs @ _direction(a, e)
        score[chosen] = -np.inf
        chosen.append(int(np.argmax(score)))
    contour = np.zeros(N_LANDMARKS, dtype=bool)
    contour[:N_CONTOUR] = True

    return MorphableModel(verts.reshape(-1), id_basis, exp_basis, faces, uv,
                          np.array(chosen, dtype=np.int64), contour)


# --------------------------------------------------------------------------
# file formats


def save_model(path, model: MorphableModel) -> None:
    """Write the RFMM binary (little-endian).

    Header: magic, then uint32 N, m_i, m_e, triangle count, landmark count.
    Body: float32 mean, id basis (row-major), exp basis, uint32 triangles,
    float32 uv, uint32 landmark indices, uint32 contour flags.
    """
    n, mi, me = model.n_vertices, model.n_id, model.n_exp
    with open(path, "wb") as f:
        f.write(RFMM_MAGIC)
        f.write(struct.pack("<5I", n, mi, me, len(model.triangles), len(model.landmark_indices)))
        f.write(model.mean_vertices.astype("<f4").tobytes())
        f.write(model.id_basis.astype("<f4").tobytes())
        f.write(model.exp_basis.astype("<f4").tobytes())
        f.write(model.triangles.astype("<u4").tobytes())
        f.write(model.uv_coords.astype("<f4").tobytes())
        f.write(model.landmark_indices.astype("<u4").tobytes())
        f.write(model.contour_mask.astype("<u4").tobytes())


def load_model(path) -> MorphableModel:
    data = Path(path).read_bytes()
    if data[:4] != RFMM_MAGIC:
        raise ValueError(f"{path}: not an RFMM file")
    n, mi, me, nt, nl = struct.unpack_from("<5I", data, 4)
    off = 24

    def take(dtype, count, shape):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated RFMM file")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr

    mean = take("<f4", 3 * n, (3 * n,)).astype(np.float64)
    idb = take("<f4", 3 * n * mi, (3 * n, mi)).astype(np.float64)
    expb = take("<f4", 3 * n * me, (3 * n, me)).astype(np.float64)
    tri = take("<u4", 3 * nt, (nt, 3)).astype(np.int64)
    uv = take("<f4", 2 * n, (n, 2)).astype(np.float64)
    lm = take("<u4", nl, (nl,)).astype(np.int64)
    contour = take("<u4", nl, (nl,)).astype(bool)
    return MorphableModel(mean, idb, expb, tri, uv, lm, contour)


def export_obj(path, mesh: Mesh) -> None:
    """Wavefront OBJ with v/vt/f records (1-based, vertex index == uv index)."""
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.6f} {1.0 - v:.6f}" for u, v in mesh.uv_coords]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
