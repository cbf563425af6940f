import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refield.morphable import Mesh
from refield.raster import TextureMap, backprop_texture, rasterize_geometry, render_texture
from refield.reflectance import (N_FEATURES, PredictorInput, StaleCacheError, TexelPerceptron,
                                 load_network, predict_analytic, predictor_backward,
                                 predictor_forward, predictor_forward_values, save_network)
from refield.transport import BRDFParams

from conftest import small_camera


def unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_input(size=4, seed=0, light=(0.3, -0.2, -0.9), holes=True):
    rng = np.random.default_rng(seed)
    mask = np.ones((size, size), bool)
    if holes:
        mask[0, 0] = mask[-1, 1] = False
    tex = TextureMap(rng.uniform(size=(size, size, 3)).astype(np.float32), mask)
    ns = TextureMap(unit_rows(rng.normal(size=(size, size, 3))).astype(np.float32), mask)
    nt = TextureMap(unit_rows(rng.normal(size=(size, size, 3))).astype(np.float32), mask)
    return PredictorInput(tex, ns, nt, unit_rows(np.array(light, float)))


def normal_input(normal, light, size=3):
    n = TextureMap(np.broadcast_to(np.asarray(normal, np.float32), (size, size, 3)).copy(),
                   np.ones((size, size), bool))
    return PredictorInput(TextureMap.constant(0.5, size), n, n, np.asarray(light, float))


# ---------------------------------------------------------------- analytic baseline


def test_analytic_light_along_normal():
    out = predict_analytic(normal_input([0, 0, -1], [0, 0, -1.0]), BRDFParams(TextureMap.constant(1.0, 8)))
    np.testing.assert_allclose(out.data, 1.0, atol=1e-6)


def test_analytic_light_opposite_normal():
    out = predict_analytic(normal_input([0, 0, -1], [0, 0, 1.0]), BRDFParams(TextureMap.constant(1.0, 8)))
    assert not out.data.any()


@given(st.floats(0, 1), st.floats(0, 1))
def test_analytic_linear_in_albedo(a, b):
    inp = make_input(seed=3)
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    mix = (a * x + b * y) / 2

    def run(t):
        return predict_analytic(inp, BRDFParams(TextureMap(t, np.ones((8, 8), bool)))).data.astype(np.float64)

    np.testing.assert_allclose(run(mix), (a * run(x) + b * run(y)) / 2, atol=1e-6)


def test_input_validation():
    inp = make_input()
    with pytest.raises(ValueError):
        PredictorInput(inp.source_texture, inp.source_normals, TextureMap.constant(0, 5), inp.light_dir)
    with pytest.raises(ValueError):
        PredictorInput(inp.source_texture, inp.source_normals, inp.target_normals, [0, 0, 2.0])


# ---------------------------------------------------------------- perceptron forward


def test_zero_network_outputs_ln2():
    out = predictor_forward(TexelPerceptron(), make_input())
    m = out.valid_mask
    np.testing.assert_allclose(out.data[m], np.log(2.0), rtol=1e-6)
    assert not out.data[~m].any()


def test_linear_layer_matches_dense_oracle():
    inp = make_input(seed=5)
    rng = np.random.default_rng(6)
    w = np.zeros((N_FEATURES, 3))
    w[:3] = np.eye(3)  # identity on the RGB slots
    w += 0.1 * rng.normal(size=w.shape)
    b = rng.normal(size=3)
    net = TexelPerceptron((N_FEATURES, 3), [w], [b], output_activation="identity")
    out = predictor_forward_values(net, inp)
    # feature rows assembled by hand, texel by texel
    h, wd = inp.valid_mask.shape
    for r in range(h):
        for c in range(wd):
            if not inp.valid_mask[r, c]:
                assert not out[r, c].any()
                continue
            f = np.concatenate([inp.source_texture.data[r, c], inp.source_normals.data[r, c],
                                inp.target_normals.data[r, c], inp.light_dir,
                                [(c + 0.5) / wd, (r + 0.5) / h]])
            np.testing.assert_allclose(out[r, c], f @ w + b, rtol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31))
def test_texel_permutation_equivariance(seed):
    net = TexelPerceptron.initialize(seed % 1000)
    x = np.random.default_rng(seed).normal(size=(30, N_FEATURES))
    perm = np.random.default_rng(seed + 1).permutation(30)
    # bitwise equality is not guaranteed: BLAS may block rows differently
    np.testing.assert_allclose(net.forward(x[perm]), net.forward(x)[perm], rtol=1e-12, atol=1e-15)


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 20))
def test_output_is_non_negative(seed, scale):
    net = TexelPerceptron.initialize(seed % 1000)
    net.biases[-1][:] = -scale
    x = scale * np.random.default_rng(seed).normal(size=(50, N_FEATURES))
    assert net.forward(x).min() >= 0


def test_feature_dimension_mismatch():
    with pytest.raises(ValueError):
        TexelPerceptron.initialize(0, sizes=(10, 4, 3)).forward(make_input().features())


# ---------------------------------------------------------------- backward


def fd_check(net, loss, grads, h=1e-4, tol=1e-3):
    for p, g in zip(net.parameters, grads):
        flat, gflat = p.ravel(), g.ravel()
        fd = np.empty_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            fd[i] = (fp - fm) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-2 * max(np.abs(fd).max(), 1e-8))
        assert np.max(np.abs(gflat - fd) / scale) < tol


def test_backward_matches_finite_differences():
    net = TexelPerceptron.initialize(1)
    inp = make_input(seed=2)
    up = np.random.default_rng(3).normal(size=(4, 4, 3))
    predictor_forward(net, inp)
    grads = predictor_backward(net, inp, up)
    fd_check(net, lambda: float(np.sum(predictor_forward_values(net, inp) * up)), grads)


def test_zero_and_scaled_output_gradients():
    net = TexelPerceptron.initialize(4)
    inp = make_input(seed=4)
    predictor_forward(net, inp)
    assert all(not g.any() for g in predictor_backward(net, inp, np.zeros((4, 4, 3))))
    up = np.random.default_rng(0).normal(size=(4, 4, 3))
    g1 = predictor_backward(net, inp, up)
    g3 = predictor_backward(net, inp, TextureMap(3 * up, np.ones((4, 4), bool)))
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(b, 3 * a, rtol=1e-12, atol=1e-15)


def test_stale_cache_is_detected():
    net = TexelPerceptron.initialize(0)
    inp = make_input()
    with pytest.raises(StaleCacheError):
        predictor_backward(net, inp, np.zeros((4, 4, 3)))
    predictor_forward(net, inp)
    with pytest.raises(StaleCacheError):
        predictor_backward(net, make_input(seed=9), np.zeros((4, 4, 3)))
    net.touch()
    with pytest.raises(StaleCacheError):
        predictor_backward(net, inp, np.zeros((4, 4, 3)))


def test_end_to_end_gradient_through_rasterizer():
    # 4x4 predicted texture rendered into an 8x8 image of a tilted quad
    v = np.array([[-1.0, -1, 3], [1, -1, 3.5], [-1, 1, 3.2], [1, 1, 3.8]])
    uv = np.array([[0, 0], [1, 0], [0, 1], [1, 1.0]])
    mesh = Mesh(v, np.array([[0, 2, 1], [1, 2, 3]]), uv, "camera")
    fb = rasterize_geometry(mesh, small_camera(8, focal=10.0))
    inp = make_input(seed=8, holes=False)
    x = inp.features()
    # keep every pre-activation well clear of the leaky-ReLU kink so central differences are valid
    for seed in range(50):
        net = TexelPerceptron.initialize(seed, sizes=(N_FEATURES, 16, 16, 3))
        if min(np.abs(z).min() for z in net.forward(x, keep=True)[1][0]) > 1e-3:
            break
    else:
        pytest.fail("no kink-free network among 50 seeds")
    target = np.random.default_rng(9).uniform(size=(8, 8, 3))

    def loss():
        img = render_texture(fb, predictor_forward_values(net, inp))
        return float(np.sum((img - target) ** 2 * fb.mask[..., None]))

    tex = predictor_forward(net, inp).data.astype(np.float64)
    img = render_texture(fb, predictor_forward_values(net, inp))
    dimg = 2 * (img - target) * fb.mask[..., None]
    grads = predictor_backward(net, inp, backprop_texture(fb, dimg, tex.shape[:2]))
    fd_check(net, loss, grads, h=1e-5)


# ---------------------------------------------------------------- files


def test_rfnn_round_trip(tmp_path):
    net = TexelPerceptron.initialize(3)
    net.biases[0][:] = np.linspace(-1, 1, 64)
    path = tmp_path / "net.rfnn"
    save_network(path, net)
    blob = path.read_bytes()
    assert blob[:4] == b"RFNN"
    back = load_network(path)
    assert back.sizes == net.sizes
    assert (back.hidden_activation, back.output_activation) == ("leaky_relu", "softplus")
    for a, b in zip(back.parameters, net.parameters):
        assert np.array_equal(a, b.astype(np.float32).astype(np.float64))
    save_network(tmp_path / "again.rfnn", back)
    assert (tmp_path / "again.rfnn").read_bytes() == blob


def test_rfnn_rejects_corruption(tmp_path):
    net = TexelPerceptron.initialize(0, sizes=(N_FEATURES, 4, 3))
    p = tmp_path / "n.rfnn"
    save_network(p, net)
    blob = p.read_bytes()
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="RFNN"):
        load_network(p)
    p.write_bytes(blob + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_network(p)
