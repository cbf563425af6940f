"""Adadelta with an extra learning-rate multiplier on the applied update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 0.05
    sq_grad: list[np.ndarray] = field(default_factory=list)    # E[g^2]
    sq_delta: list[np.ndarray] = field(default_factory=list)   # E[dx^2]

    @classmethod
    def like(cls, params, rho=0.95, eps=1e-6, lr=0.05) -> AdadeltaState:
        params = _as_list(params)
        return cls(rho, eps, lr, [np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params])


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def adadelta_step(state: AdadeltaState, params, grads):
    """One in-place update. ``params``/``grads`` are an array or a list of arrays.

    Returns the updated params (same objects) so it also works for scalars
    wrapped in 0-d arrays.
    """
    plist, glist = _as_list(params), _as_list(grads)
    if not state.sq_grad:
        state.sq_grad = [np.zeros_like(p, dtype=np.float64) for p in plist]
        state.sq_delta = [np.zeros_like(p, dtype=np.float64) for p in plist]
    if len(plist) != len(glist) or len(plist) != len(state.sq_grad):
        raise ValueError("parameter/gradient/state count mismatch")
    rho, eps = state.rho, state.eps
    for p, g, eg, ed in zip(plist, glist, state.sq_grad, state.sq_delta):
        if p.shape != g.shape or p.shape != eg.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt((ed + eps) / (eg + eps)) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p += state.lr * delta
    return params
