import numpy as np
import pytest
from hypothesis import given, strategies as st

from refield.geometry import (build_mesh, compute_vertex_normals, landmarks_2d, pose_to_camera,
                              posed_mesh, project_points, quat_from_axis_angle, quat_from_euler,
                              quat_from_matrix, quat_multiply, quat_to_matrix, rebind_contour,
                              rotation_angle_between, visible_vertices)
from refield.morphable import (N_CONTOUR, N_LANDMARKS, Camera, FaceParams, Mesh, MorphableModel,
                               export_obj, icosphere, load_model, save_model)

from conftest import plane_mesh

unit = st.floats(-1.0, 1.0, allow_nan=False)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------- model


def test_model_invariants(model):
    n = model.n_vertices
    assert model.triangles.max() < n
    assert model.uv_coords.min() >= 0 and model.uv_coords.max() <= 1
    assert model.id_basis.shape == (3 * n, 8) and model.exp_basis.shape == (3 * n, 4)
    assert len(model.landmark_indices) == N_LANDMARKS
    assert len(set(model.landmark_indices.tolist())) == N_LANDMARKS
    assert model.contour_mask.sum() == N_CONTOUR
    assert np.all(model.contour_mask[:N_CONTOUR])


def test_model_rejects_bad_triangles(model):
    with pytest.raises(ValueError):
        MorphableModel(model.mean_vertices, model.id_basis, model.exp_basis,
                       model.triangles + model.n_vertices, model.uv_coords,
                       model.landmark_indices, model.contour_mask)


def test_model_rejects_duplicate_landmarks(model):
    idx = model.landmark_indices.copy()
    idx[1] = idx[0]
    with pytest.raises(ValueError):
        MorphableModel(model.mean_vertices, model.id_basis, model.exp_basis, model.triangles,
                       model.uv_coords, idx, model.contour_mask)


def test_rfmm_round_trip(model, tmp_path):
    path = tmp_path / "m.rfmm"
    save_model(path, model)
    assert path.read_bytes()[:4] == b"RFMM"
    back = load_model(path)
    np.testing.assert_array_equal(back.mean_vertices, model.mean_vertices.astype(np.float32))
    np.testing.assert_array_equal(back.triangles, model.triangles)
    np.testing.assert_array_equal(back.landmark_indices, model.landmark_indices)
    np.testing.assert_array_equal(back.contour_mask, model.contour_mask)
    np.testing.assert_allclose(back.id_basis, model.id_basis, rtol=1e-6)


def test_rfmm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.rfmm"
    p.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError):
        load_model(p)


def test_obj_export(frontal_mesh, tmp_path):
    p = tmp_path / "m.obj"
    export_obj(p, frontal_mesh)
    lines = p.read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == frontal_mesh.n_vertices
    assert sum(l.startswith("vt ") for l in lines) == frontal_mesh.n_vertices
    assert sum(l.startswith("f ") for l in lines) == len(frontal_mesh.triangles)


def test_face_params_unit_quaternion(model):
    with pytest.raises(ValueError):
        FaceParams(np.zeros(8), np.zeros(4), np.array([1.0, 0.1, 0, 0]), np.zeros(3))
    p = FaceParams.neutral(model)
    back = FaceParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(back.rotation, p.rotation)


# ---------------------------------------------------------------- build / pose


def test_build_mesh_zero_is_mean(model):
    m = build_mesh(model, np.zeros(8), np.zeros(4))
    np.testing.assert_array_equal(m.vertices.ravel(), model.mean_vertices)
    assert m.space == "object"


def test_build_mesh_unit_alpha(model):
    e1 = np.zeros(8)
    e1[0] = 1
    m = build_mesh(model, e1, np.zeros(4))
    np.testing.assert_allclose(m.vertices.ravel(), model.mean_vertices + model.id_basis[:, 0])


def test_build_mesh_dimension_mismatch(model):
    with pytest.raises(ValueError):
        build_mesh(model, np.zeros(7), np.zeros(4))


@given(st.integers(0, 2 ** 31))
def test_build_mesh_linear(model, seed):
    rng = np.random.default_rng(seed)
    a1, a2 = rng.normal(size=(2, 8))
    b1, b2 = rng.normal(size=(2, 4))
    lhs = build_mesh(model, a1 + a2, b1 + b2).vertices
    rhs = build_mesh(model, a1, b1).vertices + build_mesh(model, a2, b2).vertices \
        - model.mean_vertices.reshape(-1, 3)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_pose_identity(model):
    m = build_mesh(model, np.zeros(8), np.zeros(4))
    p = FaceParams(np.zeros(8), np.zeros(4), np.array([1.0, 0, 0, 0]), np.zeros(3))
    np.testing.assert_array_equal(pose_to_camera(m, p).vertices, m.vertices)


def test_pose_180_about_z(model):
    m = build_mesh(model, np.zeros(8), np.zeros(4))
    p = FaceParams(np.zeros(8), np.zeros(4), quat_from_axis_angle([0, 0, 1], np.pi), np.zeros(3))
    v = pose_to_camera(m, p).vertices
    np.testing.assert_allclose(v, m.vertices * np.array([-1, -1, 1]), atol=1e-9)


def test_pose_requires_object_space(frontal_mesh, model):
    with pytest.raises(ValueError):
        pose_to_camera(frontal_mesh, FaceParams.neutral(model))


def test_pose_rejects_non_unit_quaternion(model):
    m = build_mesh(model, np.zeros(8), np.zeros(4))
    p = FaceParams.neutral(model)
    object.__setattr__(p, "rotation", np.array([2.0, 0, 0, 0]))
    with pytest.raises(ValueError):
        pose_to_camera(m, p)


@given(st.integers(0, 2 ** 31))
def test_pose_composition(model, seed):
    rng = np.random.default_rng(seed)
    m = build_mesh(model, np.zeros(8), np.zeros(4))
    q1, q2 = random_quat(rng), random_quat(rng)
    z = np.zeros(3)
    once = pose_to_camera(m, FaceParams(np.zeros(8), np.zeros(4), q1, z))
    twice = pose_to_camera(Mesh(once.vertices, m.triangles, m.uv_coords, "object"),
                           FaceParams(np.zeros(8), np.zeros(4), q2, z))
    q21 = quat_multiply(q2, q1)
    direct = pose_to_camera(m, FaceParams(np.zeros(8), np.zeros(4), q21 / np.linalg.norm(q21), z))
    np.testing.assert_allclose(twice.vertices, direct.vertices, atol=1e-9)


@given(st.integers(0, 2 ** 31))
def test_pose_preserves_distances(model, seed):
    rng = np.random.default_rng(seed)
    m = build_mesh(model, np.zeros(8), np.zeros(4))
    p = FaceParams(np.zeros(8), np.zeros(4), random_quat(rng), rng.normal(size=3) * 100)
    v0, v1 = m.vertices[:200], pose_to_camera(m, p).vertices[:200]
    d0 = np.linalg.norm(v0[:, None] - v0[None], axis=2)
    d1 = np.linalg.norm(v1[:, None] - v1[None], axis=2)
    np.testing.assert_allclose(d1, d0, rtol=1e-6, atol=1e-9)


def test_quaternion_matrix_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = random_quat(rng)
        r = quat_to_matrix(q)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert rotation_angle_between(quat_from_matrix(r), q) < 1e-6


def test_quat_from_euler_yaw_only():
    r = quat_to_matrix(quat_from_euler(np.pi / 2, 0, 0))
    np.testing.assert_allclose(r @ [0, 0, 1], [1, 0, 0], atol=1e-12)


# ---------------------------------------------------------------- projection


def test_project_optical_axis(camera):
    np.testing.assert_allclose(project_points(camera, [[0, 0, 7.0]]), [camera.principal_point])


def test_project_unit_slope(camera):
    z = 3.0
    np.testing.assert_allclose(project_points(camera, [[z, 0, z]]),
                               [np.add(camera.principal_point, (camera.focal, 0))])


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(10, 1000))
def test_project_depth_halves_offset(camera, x, y, z):
    pp = np.asarray(camera.principal_point)
    a = project_points(camera, [[x, y, z]])[0] - pp
    b = project_points(camera, [[x, y, 2 * z]])[0] - pp
    np.testing.assert_allclose(b, a / 2, atol=1e-9)


def test_project_rejects_nonpositive_depth(camera):
    with pytest.raises(ValueError):
        project_points(camera, [[0, 0, 0.0]])


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        Camera(-1.0, (4, 4), 8, 8)
    with pytest.raises(ValueError):
        Camera(10.0, (20, 4), 8, 8)


# ---------------------------------------------------------------- normals


def test_plane_normals():
    n = compute_vertex_normals(plane_mesh())
    np.testing.assert_allclose(n, np.tile([0, 0, -1.0], (len(n), 1)), atol=1e-12)


def test_icosphere_normals_point_outward():
    v, f = icosphere(3)
    n = compute_vertex_normals(Mesh(v, f, np.zeros((len(v), 2))))
    assert np.min(np.sum(n * v, axis=1) / np.linalg.norm(v, axis=1)) > 0.99


@given(st.floats(0.01, 100.0))
def test_normals_scale_invariant(frontal_mesh, s):
    a = compute_vertex_normals(frontal_mesh)
    b = compute_vertex_normals(Mesh(frontal_mesh.vertices * s, frontal_mesh.triangles,
                                    frontal_mesh.uv_coords, "camera"))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_isolated_vertex_gets_zero_normal(caplog):
    m = plane_mesh()
    verts = np.vstack([m.vertices, [[0, 0, 50.0]]])
    uv = np.vstack([m.uv_coords, [[0.5, 0.5]]])
    n = compute_vertex_normals(Mesh(verts, m.triangles, uv, "camera"))
    np.testing.assert_array_equal(n[-1], 0.0)
    assert "no non-degenerate" in caplog.text


# ---------------------------------------------------------------- landmarks


def test_landmarks_zero_residual_on_own_projection(model, camera, frontal_mesh):
    obs = landmarks_2d(frontal_mesh, camera, model)
    again = landmarks_2d(frontal_mesh, camera, model, observed=obs)
    np.testing.assert_allclose(again - obs, 0.0, atol=1e-9)


def test_contour_rebinds_to_exact_vertex(model, camera, frontal_mesh):
    vis = np.flatnonzero(visible_vertices(frontal_mesh))
    obs = landmarks_2d(frontal_mesh, camera, model)
    target = vis[len(vis) // 3]
    obs[0] = project_points(camera, frontal_mesh.vertices[target])[0]
    idx = rebind_contour(frontal_mesh, camera, model, obs)
    assert idx[0] == target


def test_landmark_shift_under_translation(model, camera):
    dx = 7.0
    p = FaceParams.neutral(model)
    q = FaceParams(p.alpha, p.beta, p.rotation, p.translation + [dx, 0, 0])
    a = landmarks_2d(posed_mesh(model, p), camera, model)
    b = landmarks_2d(posed_mesh(model, q), camera, model)
    z = posed_mesh(model, p).vertices[model.landmark_indices, 2]
    np.testing.assert_allclose(b[:, 0] - a[:, 0], camera.focal * dx / z, rtol=1e-9)
    np.testing.assert_allclose(b[:, 1], a[:, 1], atol=1e-9)


def test_landmarks_behind_camera(model, camera):
    p = FaceParams.neutral(model, translation=(0, 0, -600.0))
    with pytest.raises(ValueError):
        landmarks_2d(posed_mesh(model, p), camera, model)
