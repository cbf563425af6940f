"""Training losses and the scale-invariant MSE metric."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    landmark: float = 25.0
    photometric: float = 5.0
    regularizer: float = 1.0
    feature: float = 1.0
    alpha: float = 0.4
    beta: float = 0.002

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


def landmark_loss(predicted, observed) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise ValueError(f"landmark count mismatch: {p.shape} vs {o.shape}")
    if np.isnan(p).any() or np.isnan(o).any():
        raise ValueError("NaN landmark coordinates")
    return float(np.sum((p - o) ** 2))


def geometry_regularizer(alpha, beta, weights: LossWeights = LossWeights()) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    return float(weights.alpha * a @ a + weights.beta * b @ b)


def _mask_pixels(mask, shape):
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {shape[:2]}")
    return mask


def photometric_l1(rendered, target, mask=None) -> float:
    """Masked L1 summed over channels and divided by the masked-pixel count."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {t.shape}")
    m = _mask_pixels(mask, r.shape)
    count = int(m.sum())
    if count == 0:
        log.warning("photometric_l1: empty mask")
        return 0.0
    return float(np.abs(r[m] - t[m]).sum() / count)


def photometric_l1_grad(rendered, target, mask=None) -> np.ndarray:
    """Subgradient of :func:`photometric_l1` w.r.t. ``rendered`` (sign(0) = 0)."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = _mask_pixels(mask, r.shape)
    count = int(m.sum())
    g = np.zeros_like(r)
    if count:
        g[m] = np.sign(r[m] - t[m]) / count
    return g


def pyramid_l2(rendered, target, mask=None, levels: int = 3) -> float:
    """Squared error over a 2x box-filtered pyramid; stand-in for feature losses."""
    shape = np.shape(rendered)
    r = np.asarray(rendered, dtype=np.float64).reshape(shape[0], shape[1], -1)
    t = np.asarray(target, dtype=np.float64).reshape(r.shape)
    m = _mask_pixels(mask, r.shape).astype(np.float64)[..., None]
    total = 0.0
    a, b = r * m, t * m
    for _ in range(levels):
        total += float(np.mean((a - b) ** 2))
        h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
        if h < 2 or w < 2:
            break
        a = a[:h, :w].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
        b = b[:h, :w].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
    return total


def pyramid_l2_grad(rendered, target, mask=None, levels: int = 3) -> np.ndarray:
    """Gradient of :func:`pyramid_l2` w.r.t. ``rendered``."""
    shape = np.shape(rendered)
    r = np.asarray(rendered, dtype=np.float64).reshape(shape[0], shape[1], -1)
    t = np.asarray(target, dtype=np.float64).reshape(r.shape)
    m = _mask_pixels(mask, r.shape).astype(np.float64)[..., None]
    a, b = r * m, t * m
    ups = []  # per level: (diff, crop shape) to push back to full resolution
    for _ in range(levels):
        ups.append((2.0 * (a - b) / a.size, a.shape))
        h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
        if h < 2 or w < 2:
            break
        a = a[:h, :w].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
        b = b[:h, :w].reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
    g = np.zeros_like(ups[-1][0])
    for level in range(len(ups) - 1, -1, -1):
        d, lshape = ups[level]
        g = g + d
        if level:
            up = np.zeros(ups[level - 1][1])
            h, w = lshape[0] * 2, lshape[1] * 2
            up[:h, :w] = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
            g = up
    return (g * m).reshape(shape)


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of ``landmark``, ``regularizer``, ``photometric`` and ``feature``.

    Missing components count as zero (e.g. the feature surrogate when disabled).
    """
    known = {"landmark", "regularizer", "photometric", "feature"}
    extra = set(components) - known
    if extra:
        raise ValueError(f"unknown loss components {sorted(extra)}")
    return float(weights.landmark * components.get("landmark", 0.0)
                 + weights.regularizer * components.get("regularizer", 0.0)
                 + weights.photometric * components.get("photometric", 0.0)
                 + weights.feature * components.get("feature", 0.0))


def mse(predicted, target, mask=None) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = _mask_pixels(mask, p.shape)
    if not m.any():
        return 0.0
    return float(np.mean((p[m] - t[m]) ** 2))


def si_mse(predicted, target, mask=None) -> float:
    """MSE after scaling ``predicted`` by the single least-squares optimal scalar."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {t.shape}")
    m = _mask_pixels(mask, p.shape)
    if not m.any():
        return 0.0
    pm, tm = p[m].ravel(), t[m].ravel()
    pp = pm @ pm
    s = (pm @ tm) / pp if pp > 0 else 0.0
    return float(np.mean((s * pm - tm) ** 2))
