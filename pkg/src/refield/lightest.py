"""Environment lighting from an image, as non-negative-optional least squares
over OLAT basis weights with optional Adadelta refinement."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .adadelta import AdadeltaState, adadelta_step
from .transport import LightRig, OLATSet


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class LightSolve:
    weights: np.ndarray  # (N, 3)
    residual: float
    condition: float
    ridge: float
    nonneg: bool = False


def _design(olats: OLATSet | np.ndarray, target, mask):
    imgs = olats.images if isinstance(olats, OLATSet) else np.asarray(olats)
    target = np.asarray(target, dtype=np.float64)
    if imgs.shape[1:] != target.shape:
        raise ValueError(f"OLAT size {imgs.shape[1:]} does not match target {target.shape}")
    if mask is None:
        mask = olats.mask if isinstance(olats, OLATSet) and olats.mask is not None else None
    if mask is None:
        mask = np.ones(target.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    g = imgs[:, mask, :].astype(np.float64)  # (N, P, 3)
    return np.moveaxis(g, 0, 1), target[mask]  # (P, N, 3), (P, 3)


def _residual(g, b, lam) -> float:
    r = np.einsum("pnc,nc->pc", g, lam) - b
    return float(np.sum(r * r))


def _nonneg_channel(a, rhs, x0, tol, max_iter):
    """Projected gradient (FISTA with restart) on 0.5 x'Ax - rhs'x, x >= 0."""
    step = 1.0 / np.linalg.eigvalsh(a)[-1]
    scale = max(1.0, np.abs(rhs).max())
    x = np.maximum(x0, 0.0)
    y, tk = x.copy(), 1.0
    for _ in range(max_iter):
        grad = a @ x - rhs
        if np.abs(np.minimum(x, grad)).max() / scale < tol:
            break
        xn = np.maximum(y - step * (a @ y - rhs), 0.0)
        tn = (1 + np.sqrt(1 + 4 * tk * tk)) / 2
        if (xn - x) @ (a @ xn - rhs) > 0:  # restart on non-monotone progress
            y, tk = xn.copy(), 1.0
        else:
            y = xn + (tk - 1) / tn * (xn - x)
            tk = tn
        x = xn
    return x


def kkt_residual(a, rhs, x) -> float:
    grad = a @ x - rhs
    return float(np.abs(np.minimum(x, grad)).max() / max(1.0, np.abs(rhs).max()))


def estimate_light_lsq(olats: OLATSet | np.ndarray, target, mask=None, ridge: float | None = None,
                       nonneg: bool = False, tol: float = 1e-8, max_iter: int = 100000,
                       relative_ridge: float = 1e-6) -> LightSolve:
    """Per-channel ridge least squares for the OLAT weights.

    ``ridge`` is the absolute tau; when omitted it defaults to
    ``relative_ridge * trace(G'G) / N``.
    """
    g, b = _design(olats, target, mask)
    n = g.shape[1]
    lam = np.zeros((n, 3))
    cond = 0.0
    tau_used = 0.0
    for c in range(3):
        gc = np.ascontiguousarray(g[:, :, c])  # strided slices miss the BLAS fast path
        a = gc.T @ gc
        tau = relative_ridge * np.trace(a) / n if ridge is None else float(ridge)
        tau_used = max(tau_used, tau)
        a_r = a + tau * np.eye(n)
        cond = max(cond, float(np.linalg.cond(a_r)))
        rhs = gc.T @ b[:, c]
        if tau == 0 and np.linalg.matrix_rank(a) < n:
            raise RankDeficientError("G'G is rank deficient; pass a positive ridge")
        if nonneg:
            # active-set start, then projected-gradient polish to the KKT tolerance
            aug = np.vstack([gc, np.sqrt(tau) * np.eye(n)]) if tau > 0 else gc
            x0, _ = nnls(aug, np.concatenate([b[:, c], np.zeros(n)]) if tau > 0 else b[:, c],
                         maxiter=50 * n)
            lam[:, c] = x0 if kkt_residual(a_r, rhs, x0) < tol else _nonneg_channel(a_r, rhs, x0, tol, max_iter)
        else:
            lam[:, c] = np.linalg.solve(a_r, rhs)
    return LightSolve(lam, _residual(g, b, lam), cond, tau_used, nonneg)


def photometric_objective(olats: OLATSet | np.ndarray, target, mask=None):
    """Squared masked residual of a weight vector, with its gradient."""
    g, b = _design(olats, target, mask)

    def f(lam, grad: bool = False):
        lam = np.asarray(lam, dtype=np.float64).reshape(-1, 3)
        r = np.einsum("pnc,nc->pc", g, lam) - b
        val = float(np.sum(r * r))
        if not grad:
            return val
        return val, 2.0 * np.einsum("pnc,pc->nc", g, r)

    return f


def _numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def refine_light(init: LightSolve, objective, steps: int = 200, state: AdadeltaState | None = None,
                 gradient=None) -> LightSolve:
    """Adadelta descent from ``init``; returns the best weights seen.

    ``objective(lam)`` returns a scalar. If it accepts ``grad=True`` and
    returns (value, gradient) that gradient is used; otherwise ``gradient``
    or central differences.
    """
    lam = np.array(init.weights, dtype=np.float64)

    def evaluate(x):
        if gradient is not None:
            return float(objective(x)), gradient(x)
        try:
            v, g = objective(x, grad=True)
            return float(v), np.asarray(g, dtype=np.float64).reshape(x.shape)
        except TypeError:
            return float(objective(x)), _numeric_grad(lambda y: float(objective(y)), x.copy())

    val, g = evaluate(lam)
    if not np.isfinite(val):
        raise FloatingPointError("objective is not finite at the initial weights")
    best, best_val = lam.copy(), val
    st = state or AdadeltaState.like(lam)
    for _ in range(steps):
        adadelta_step(st, lam, g)
        if init.nonneg:
            np.maximum(lam, 0.0, out=lam)
        val, g = evaluate(lam)
        if np.isfinite(val) and val < best_val:
            best, best_val = lam.copy(), val
    return LightSolve(best, best_val, init.condition, init.ridge, init.nonneg)


def save_light(path, solve: LightSolve, rig: LightRig) -> None:
    doc = {"directions": rig.directions.tolist(), "weights": solve.weights.tolist(),
           "residual": solve.residual, "ridge": solve.ridge, "nonneg": solve.nonneg}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_light(path) -> tuple[LightSolve, LightRig]:
    with open(path) as fh:
        doc = json.load(fh)
    rig = LightRig(np.array(doc["directions"]))
    return LightSolve(np.array(doc["weights"]), doc["residual"], float("nan"), doc["ridge"],
                      doc["nonneg"]), rig
