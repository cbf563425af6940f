"""Reflectance-field predictors: a Lambertian baseline and a per-texel perceptron.

Both map (source texture, source normals, target normals, light direction)
to a UV-space radiance texture. The perceptron has no cross-texel
connections, so it is exactly equivariant to texel permutations.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .raster import TextureMap, sample_texture

FEATURE_LAYOUT_VERSION = 1
N_FEATURES = 14  # rgb 3, source normal 3, target normal 3, light 3, uv 2
RFNN_MAGIC = b"RFNN"
ACTIVATIONS = {"identity": 0, "leaky_relu": 1, "softplus": 2}
LEAK = 0.01


class StaleCacheError(RuntimeError):
    pass


@dataclass
class PredictorInput:
    source_texture: TextureMap
    source_normals: TextureMap
    target_normals: TextureMap
    light_dir: np.ndarray

    def __post_init__(self):
        shapes = {self.source_texture.data.shape[:2], self.source_normals.data.shape[:2],
                  self.target_normals.data.shape[:2]}
        if len(shapes) != 1:
            raise ValueError(f"predictor inputs have mismatched sizes {shapes}")
        d = np.asarray(self.light_dir, dtype=np.float64)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("light_dir must be a unit 3-vector")
        self.light_dir = d

    @property
    def valid_mask(self) -> np.ndarray:
        return self.target_normals.valid_mask

    def features(self) -> np.ndarray:
        """(P, 14) feature rows for valid texels in row-major order."""
        m = self.valid_mask
        h, w = m.shape
        rows, cols = np.nonzero(m)
        uv = np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
        src = self.source_texture.data[m] * self.source_texture.valid_mask[m, None]
        return np.concatenate([src, self.source_normals.data[m], self.target_normals.data[m],
                               np.broadcast_to(self.light_dir, (len(rows), 3)), uv],
                              axis=1).astype(np.float64)


# --------------------------------------------------------------------------
# analytic baseline


def predict_analytic(inp: PredictorInput, brdf) -> TextureMap:
    """Albedo times clamped cosine with the target normals; optional Blinn
    term (viewer along -z) when the BRDF has k_s > 0. No shadows."""
    m = inp.valid_mask
    h, w = m.shape
    rows, cols = np.nonzero(m)
    uv = np.stack([(cols + 0.5) / w, (rows + 0.5) / h], axis=1)
    albedo = sample_texture(brdf.diffuse_albedo.data, uv)
    n = inp.target_normals.data[m].astype(np.float64)
    ndl = n @ inp.light_dir
    val = albedo * np.maximum(ndl, 0.0)[:, None]
    if brdf.specular_strength > 0:
        hv = inp.light_dir + np.array([0.0, 0.0, -1.0])
        hn = np.linalg.norm(hv)
        if hn > 0:
            ndh = np.maximum(n @ (hv / hn), 0.0)
            val += (brdf.specular_strength * ndh ** brdf.shininess * (ndl > 0))[:, None]
    out = np.zeros((h, w, 3), dtype=np.float32)
    out[m] = val
    return TextureMap(out, m.copy())


# --------------------------------------------------------------------------
# perceptron


def _act(name, x):
    if name == "identity":
        return x
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAK * x)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, x):
    if name == "identity":
        return np.ones_like(x)
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, LEAK)
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic, overflow-free
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class TexelPerceptron:
    sizes: tuple[int, ...] = (N_FEATURES, 64, 64, 3)
    weights: list[np.ndarray] = field(default_factory=list)  # (in, out)
    biases: list[np.ndarray] = field(default_factory=list)
    hidden_activation: str = "leaky_relu"
    output_activation: str = "softplus"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if not self.weights:
            self.weights = [np.zeros((a, b)) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
            self.biases = [np.zeros(b) for b in self.sizes[1:]]
        for w, b, a, o in zip(self.weights, self.biases, self.sizes[:-1], self.sizes[1:]):
            if w.shape != (a, o) or b.shape != (o,):
                raise ValueError("weight shapes do not match layer sizes")
        self._version = 0
        self._cache = None

    @classmethod
    def initialize(cls, seed: int = 0, sizes=(N_FEATURES, 64, 64, 3), **kw) -> TexelPerceptron:
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        ws = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (a + b))
            ws.append(rng.uniform(-lim, lim, size=(a, b)))
        return cls(tuple(sizes), ws, [np.zeros(b) for b in sizes[1:]], **kw)

    @property
    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def activation(self, layer: int) -> str:
        return self.output_activation if layer == len(self.weights) - 1 else self.hidden_activation

    def touch(self) -> None:
        """Mark parameters as changed (invalidates cached activations)."""
        self._version += 1

    def forward(self, x: np.ndarray, keep: bool = False):
        """Rows of ``x`` are independent texels."""
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected (P, {self.sizes[0]}) features, got {x.shape}")
        pre, post = [], [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _act(self.activation(i), z)
            pre.append(z)
            post.append(h)
        return (h, (pre, post)) if keep else h

    def backward(self, acts, grad_out: np.ndarray) -> list[np.ndarray]:
        pre, post = acts
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            g = g * _act_grad(self.activation(i), pre[i])
            grads[2 * i] = post[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = g @ self.weights[i].T
        return grads


def _input_key(x: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(x).tobytes()).hexdigest()


def predictor_forward(net: TexelPerceptron, inp: PredictorInput) -> TextureMap:
    x = inp.features()
    m = inp.valid_mask
    y, acts = net.forward(x, keep=True)
    net._cache = (_input_key(x), net._version, acts, m.copy())
    out = np.zeros(m.shape + (net.sizes[-1],), dtype=np.float32)
    out[m] = y
    return TextureMap(out, m.copy())


def predictor_forward_values(net: TexelPerceptron, inp: PredictorInput) -> np.ndarray:
    """Float64 output raster without caching (zero outside the mask)."""
    m = inp.valid_mask
    out = np.zeros(m.shape + (net.sizes[-1],))
    out[m] = net.forward(inp.features())
    return out


def predictor_backward(net: TexelPerceptron, inp: PredictorInput, grad_output) -> list[np.ndarray]:
    """Parameter gradients [W0, b0, W1, b1, ...] given d loss / d output texture."""
    if net._cache is None:
        raise StaleCacheError("no cached forward pass")
    key, version, acts, m = net._cache
    if version != net._version or not np.array_equal(m, inp.valid_mask) or key != _input_key(inp.features()):
        raise StaleCacheError("cached activations belong to a different input or parameters")
    g = grad_output.data if isinstance(grad_output, TextureMap) else np.asarray(grad_output)
    if g.shape[:2] != m.shape:
        raise ValueError(f"gradient size {g.shape[:2]} does not match texture {m.shape}")
    return net.backward(acts, np.asarray(g, dtype=np.float64)[m])


# --------------------------------------------------------------------------
# RFNN files


def save_network(path, net: TexelPerceptron) -> None:
    n = len(net.sizes)
    with open(path, "wb") as fh:
        fh.write(RFNN_MAGIC)
        fh.write(struct.pack("<III", FEATURE_LAYOUT_VERSION, n, len(net.weights)))
        fh.write(struct.pack(f"<{n}I", *net.sizes))
        fh.write(struct.pack("<II", ACTIVATIONS[net.hidden_activation],
                             ACTIVATIONS[net.output_activation]))
        for w, b in zip(net.weights, net.biases):
            fh.write(np.asarray(w, dtype="<f4").tobytes())
            fh.write(np.asarray(b, dtype="<f4").tobytes())


def load_network(path) -> TexelPerceptron:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RFNN_MAGIC:
        raise ValueError("not an RFNN file")
    version, n, n_layers = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_LAYOUT_VERSION:
        raise ValueError(f"unsupported feature layout version {version}")
    off = 16
    sizes = struct.unpack_from(f"<{n}I", blob, off)
    off += 4 * n
    hid, outp = struct.unpack_from("<II", blob, off)
    off += 8
    names = {v: k for k, v in ACTIVATIONS.items()}
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(np.frombuffer(blob, "<f4", a * b, off).reshape(a, b).astype(np.float64))
        off += 4 * a * b
        bs.append(np.frombuffer(blob, "<f4", b, off).astype(np.float64))
        off += 4 * b
    if off != len(blob):
        raise ValueError("trailing bytes in RFNN file")
    return TexelPerceptron(sizes, ws, bs, names[hid], names[outp])
