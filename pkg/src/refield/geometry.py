"""Mesh synthesis, rigid pose, pinhole projection, normals and landmarks."""

from __future__ import annotations

import logging

import numpy as np

from .morphable import Camera, FaceParams, Mesh, MorphableModel

log = logging.getLogger(__name__)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion (w, x, y, z)."""
    w, x, y, z = q
    s = w * w + x * x + y * y + z * z
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]) / s


def quat_matrix_grad(q) -> np.ndarray:
    """d R / d q_i for the homogeneous formula above, shape (4, 3, 3)."""
    w, x, y, z = q
    s = w * w + x * x + y * y + z * z
    m = quat_to_matrix(q) * s
    dm = np.array([
        [[w, -z, y], [z, w, -x], [-y, x, w]],
        [[x, y, z], [y, -x, -w], [z, w, -x]],
        [[-y, x, w], [x, y, z], [-w, z, -y]],
        [[-z, -w, x], [w, -z, y], [x, y, z]],
    ]) * 2.0
    return dm / s - m[None] * (2.0 * np.asarray(q)[:, None, None] / s ** 2)


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix (Shepperd's method)."""
    tr = np.trace(r)
    cands = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
    i = int(np.argmax(cands))
    if i == 0:
        w = 0.5 * np.sqrt(1 + tr)
        q = [w, (r[2, 1] - r[1, 2]) / (4 * w), (r[0, 2] - r[2, 0]) / (4 * w), (r[1, 0] - r[0, 1]) / (4 * w)]
    elif i == 1:
        x = 0.5 * np.sqrt(1 + 2 * r[0, 0] - tr)
        q = [(r[2, 1] - r[1, 2]) / (4 * x), x, (r[0, 1] + r[1, 0]) / (4 * x), (r[0, 2] + r[2, 0]) / (4 * x)]
    elif i == 2:
        y = 0.5 * np.sqrt(1 + 2 * r[1, 1] - tr)
        q = [(r[0, 2] - r[2, 0]) / (4 * y), (r[0, 1] + r[1, 0]) / (4 * y), y, (r[1, 2] + r[2, 1]) / (4 * y)]
    else:
        z = 0.5 * np.sqrt(1 + 2 * r[2, 2] - tr)
        q = [(r[1, 0] - r[0, 1]) / (4 * z), (r[0, 2] + r[2, 0]) / (4 * z), (r[1, 2] + r[2, 1]) / (4 * z), z]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_from_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Yaw about y, then pitch about x, then roll about z (radians)."""
    qy = quat_from_axis_angle([0, 1, 0], yaw)
    qx = quat_from_axis_angle([1, 0, 0], pitch)
    qz = quat_from_axis_angle([0, 0, 1], roll)
    return quat_multiply(qz, quat_multiply(qx, qy))


def rotation_angle_between(q1, q2) -> float:
    """Geodesic distance on SO(3) in radians."""
    d = abs(float(np.dot(q1, q2)) / (np.linalg.norm(q1) * np.linalg.norm(q2)))
    return 2.0 * np.arccos(min(1.0, d))


def build_mesh(model: MorphableModel, alpha, beta) -> Mesh:
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (model.n_id,) or beta.shape != (model.n_exp,):
        raise ValueError(f"coefficient shapes {alpha.shape}, {beta.shape} do not match "
                         f"bases ({model.n_id},), ({model.n_exp},)")
    v = model.mean_vertices + model.id_basis @ alpha + model.exp_basis @ beta
    return Mesh(v.reshape(-1, 3), model.triangles, model.uv_coords, "object")


def pose_to_camera(mesh: Mesh, params: FaceParams) -> Mesh:
    if mesh.space != "object":
        raise ValueError("pose_to_camera expects an object-space mesh")
    q = np.asarray(params.rotation, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise ValueError("rotation quaternion is not unit norm")
    r = quat_to_matrix(q)
    v = mesh.vertices @ r.T + np.asarray(params.translation, dtype=np.float64)
    return Mesh(v, mesh.triangles, mesh.uv_coords, "camera")


def posed_mesh(model: MorphableModel, params: FaceParams) -> Mesh:
    return pose_to_camera(build_mesh(model, params.alpha, params.beta), params)


def project_points(camera: Camera, points) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if np.any(p[:, 2] <= 0):
        raise ValueError("cannot project points at non-positive depth")
    cx, cy = camera.principal_point
    return np.stack([cx + camera.focal * p[:, 0] / p[:, 2],
                     cy + camera.focal * p[:, 1] / p[:, 2]], axis=1)


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (length = 2 x area)."""
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    return np.cross(v1 - v0, v2 - v0)


def compute_vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted vertex normals. Isolated vertices get (0, 0, 0)."""
    fn = face_normals(mesh.vertices, mesh.triangles)
    n = mesh.n_vertices
    tri = mesh.triangles.ravel()
    fn3 = np.repeat(fn, 3, axis=0)
    acc = np.stack([np.bincount(tri, weights=fn3[:, c], minlength=n) for c in range(3)], axis=1)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 1e-12 * max(1.0, np.abs(mesh.vertices).max())
    if np.any(bad):
        log.warning("%d vertices have no non-degenerate incident triangle", int(bad.sum()))
    out = np.zeros_like(acc)
    out[~bad] = acc[~bad] / norm[~bad, None]
    return out


def visible_vertices(mesh: Mesh, normals: np.ndarray | None = None) -> np.ndarray:
    """Vertices whose normal faces the camera centre (camera-space mesh)."""
    if normals is None:
        normals = compute_vertex_normals(mesh)
    return (np.einsum("ij,ij->i", normals, mesh.vertices) < 0) & (mesh.vertices[:, 2] > 0)


def rebind_contour(mesh: Mesh, camera: Camera, model: MorphableModel,
                   observed: np.ndarray) -> np.ndarray:
    """Landmark vertex indices with contour entries moved to the visible vertex
    whose projection is closest to the observed point."""
    idx = model.landmark_indices.copy()
    vis = np.flatnonzero(visible_vertices(mesh))
    if len(vis) == 0:
        return idx
    proj = project_points(camera, mesh.vertices[vis])
    for k in model.contour_landmarks:
        d2 = np.sum((proj - observed[k]) ** 2, axis=1)
        idx[k] = vis[int(np.argmin(d2))]
    return idx


def landmarks_2d(mesh: Mesh, camera: Camera, model: MorphableModel,
                 observed: np.ndarray | None = None,
                 indices: np.ndarray | None = None) -> np.ndarray:
    """Project the 66 landmarks, optionally re-binding the contour to observations."""
    if mesh.space != "camera":
        raise ValueError("landmarks_2d expects a camera-space mesh")
    if indices is None:
        indices = (model.landmark_indices if observed is None
                   else rebind_contour(mesh, camera, model, np.asarray(observed, dtype=np.float64)))
    pts = mesh.vertices[indices]
    if np.any(pts[:, 2] <= 0):
        raise ValueError("landmark vertex behind the camera")
    return project_points(camera, pts)
