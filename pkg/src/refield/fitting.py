"""Per-image geometry fitting: landmark alignment plus coefficient priors,
minimized with Adadelta from a perspective (POSIT) initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adadelta import AdadeltaState, adadelta_step
from .geometry import (build_mesh, landmarks_2d, pose_to_camera, quat_from_matrix,
                       quat_matrix_grad, quat_to_matrix, rebind_contour)
from .losses import LossWeights
from .morphable import Camera, FaceParams, MorphableModel


class FitDivergedError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"geometry fit diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class FitConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 800
    # iterations on the non-contour landmarks before contour re-binding starts
    warmup: int = 600
    restart: int = 200
    lr: float = 0.3
    rho: float = 0.95
    eps: float = 1e-2
    whiten: bool = True
    # stop once the loss improved by less than this (relative) over `patience` steps
    tol: float = 1e-7
    patience: int = 60
    init: str = "posit"  # or "neutral"
    # POSIT shape/pose alternation rounds per start; the lowest final loss wins
    posit_rounds: tuple[int, ...] = (10, 1)


@dataclass
class FitResult:
    params: FaceParams
    loss: float
    iterations: int
    landmark_rmse: float
    history: list[float]


def objective(model: MorphableModel, camera: Camera, observed: np.ndarray,
              indices: np.ndarray, alpha, beta, q, t,
              weights: LossWeights = LossWeights(), grad: bool = True,
              landmark_mask: np.ndarray | None = None):
    """Landmark + regularizer loss for fixed landmark vertex ``indices``.

    Returns (loss, (d_alpha, d_beta, d_q, d_t)); gradients are exact for the
    homogeneous quaternion parametrization, so ``q`` need not be unit.
    ``landmark_mask`` drops landmarks from the sum (used during warm-up).
    """
    rows = (3 * indices[:, None] + np.arange(3)).ravel()
    a_k = model.id_basis[rows].reshape(len(indices), 3, -1)
    e_k = model.exp_basis[rows].reshape(len(indices), 3, -1)
    p = model.mean_vertices[rows].reshape(-1, 3) + a_k @ alpha + e_k @ beta
    r = quat_to_matrix(q)
    c = p @ r.T + t
    f = camera.focal
    cx, cy = camera.principal_point
    z = c[:, 2]
    proj = np.stack([cx + f * c[:, 0] / z, cy + f * c[:, 1] / z], axis=1)
    res = proj - observed
    if landmark_mask is not None:
        res = res * landmark_mask[:, None]
    loss = (weights.landmark * np.sum(res ** 2)
            + weights.alpha * alpha @ alpha + weights.beta * beta @ beta)
    if not grad:
        return float(loss), None
    g = 2.0 * weights.landmark * res
    gc = np.empty_like(c)
    gc[:, 0] = f / z * g[:, 0]
    gc[:, 1] = f / z * g[:, 1]
    gc[:, 2] = -f / z ** 2 * (c[:, 0] * g[:, 0] + c[:, 1] * g[:, 1])
    gp = gc @ r
    d_alpha = np.einsum("kj,kjm->m", gp, a_k) + 2.0 * weights.alpha * alpha
    d_beta = np.einsum("kj,kjm->m", gp, e_k) + 2.0 * weights.beta * beta
    dr = quat_matrix_grad(q)
    d_q = np.einsum("kj,ijl,kl->i", gc, dr, p)
    d_t = gc.sum(axis=0)
    return float(loss), (d_alpha, d_beta, d_q, d_t)


def _posit(obs: np.ndarray, pts: np.ndarray, camera: Camera, rounds: int = 30):
    """Perspective pose of 3D ``pts`` from 2D ``obs`` by iterated scaled-orthographic
    fits (POSIT); returns (R, t)."""
    f = camera.focal
    xy = (obs - np.asarray(camera.principal_point)) / f
    centroid = pts.mean(axis=0)
    rel = pts - centroid
    design = np.hstack([rel, np.ones((len(rel), 1))])
    pinv = np.linalg.pinv(design)
    eps = np.zeros(len(pts))
    for _ in range(rounds):
        sol = pinv @ (xy * (1.0 + eps)[:, None])
        u, s, vt = np.linalg.svd(sol[:3].T, full_matrices=False)
        rows = u @ vt
        r = np.vstack([rows, np.cross(rows[0], rows[1])])
        z0 = 1.0 / s.mean()
        eps = rel @ r[2] / z0
    tc = np.array([sol[3, 0] * z0, sol[3, 1] * z0, z0])
    return r, tc - r @ centroid


def _linear_shape(obs, idx, model: MorphableModel, camera: Camera, r, t, weights: LossWeights):
    """Shape coefficients for a fixed pose from the perspective constraint
    (u - c) * z = f * x, rows divided by the current depth, with ridge priors."""
    rows = (3 * idx[:, None] + np.arange(3)).ravel()
    basis = np.hstack([model.id_basis[rows], model.exp_basis[rows]]).reshape(len(idx), 3, -1)
    mean = model.mean_vertices[rows].reshape(-1, 3)
    rb = np.einsum("ij,kjm->kim", r, basis)  # rotated basis, (K, 3, m)
    c0 = mean @ r.T + t
    f = camera.focal
    pp = np.asarray(camera.principal_point)
    a_rows, b_rows = [], []
    for ax in (0, 1):
        d = obs[:, ax] - pp[ax]
        w = 1.0 / c0[:, 2]
        a_rows.append(w[:, None] * (f * rb[:, ax] - d[:, None] * rb[:, 2]))
        b_rows.append(w * (d * c0[:, 2] - f * c0[:, ax]))
    a = np.vstack(a_rows)
    b = np.concatenate(b_rows)
    ridge = np.concatenate([np.full(model.n_id, weights.alpha), np.full(model.n_exp, weights.beta)])
    coef = np.linalg.solve(weights.landmark * a.T @ a + np.diag(ridge), weights.landmark * a.T @ b)
    return coef[:model.n_id], coef[model.n_id:]


def posit_init(observed: np.ndarray, model: MorphableModel, camera: Camera,
              weights: LossWeights = LossWeights(), rounds: int = 10) -> FaceParams:
    """Alternate a perspective pose solve with a linear shape solve on the
    non-contour landmarks."""
    alpha, beta = np.zeros(model.n_id), np.zeros(model.n_exp)
    fixed = ~model.contour_mask
    idx = model.landmark_indices[fixed]
    for _ in range(rounds):
        pts = build_mesh(model, alpha, beta).vertices[idx]
        r, t = _posit(observed[fixed], pts, camera)
        alpha, beta = _linear_shape(observed[fixed], idx, model, camera, r, t, weights)
    return FaceParams(alpha, beta, quat_from_matrix(r), t)


def _residual_jacobian(model, camera, obs, idx, theta, weights, lm_mask, h=1e-6):
    """Central-difference Jacobian of the weighted residual vector (landmarks
    and priors) w.r.t. the flat parameter vector [alpha, beta, q, t]."""
    mi, me = model.n_id, model.n_exp

    def residuals(x):
        a, b, q, t = x[:mi], x[mi:mi + me], x[mi + me:mi + me + 4], x[mi + me + 4:]
        rows = (3 * idx[:, None] + np.arange(3)).ravel()
        p = (model.mean_vertices[rows] + model.id_basis[rows] @ a
             + model.exp_basis[rows] @ b).reshape(-1, 3)
        c = p @ quat_to_matrix(q).T + t
        proj = camera.focal * c[:, :2] / c[:, 2:] + np.asarray(camera.principal_point)
        return np.concatenate([np.sqrt(weights.landmark) * ((proj - obs) * lm_mask[:, None]).ravel(),
                               np.sqrt(weights.alpha) * a, np.sqrt(weights.beta) * b])

    cols = []
    for i in range(len(theta)):
        step = h * max(1.0, abs(theta[i]))
        e = np.zeros_like(theta)
        e[i] = step
        cols.append((residuals(theta + e) - residuals(theta - e)) / (2 * step))
    return np.stack(cols, axis=1)


def _whitening(model, camera, obs, theta, weights, lm_mask):
    mi, me = model.n_id, model.n_exp
    fp = FaceParams(theta[:mi], theta[mi:mi + me], theta[mi + me:mi + me + 4], theta[mi + me + 4:])
    idx = rebind_contour(pose_to_camera(build_mesh(model, fp.alpha, fp.beta), fp), camera, model, obs)
    jac = _residual_jacobian(model, camera, obs, idx, theta, weights, lm_mask)
    hess = jac.T @ jac
    # the quaternion-norm direction is a flat gauge; give it ordinary curvature
    qdir = np.zeros(len(theta))
    qdir[mi + me:mi + me + 4] = fp.rotation
    hess += np.trace(hess) / len(theta) * np.outer(qdir, qdir)
    evals, evecs = np.linalg.eigh(hess)
    return evecs / np.sqrt(np.maximum(evals, 1e-12 * evals.max()))


def fit_geometry(observed_landmarks, model: MorphableModel, camera: Camera,
                 config: FitConfig = FitConfig(), init: FaceParams | None = None) -> FitResult:
    """Minimize landmark + prior loss with Adadelta, from ``init`` or from one
    POSIT start per entry of ``config.posit_rounds`` (the lowest loss is kept).

    A warm-up phase fits only the fixed (non-contour) landmarks; the main phase
    re-binds the contour once per iteration. Every ``restart`` iterations the
    descent restarts from the best point in coordinates whitened by the
    Gauss-Newton curvature there (a fixed linear change of variables per block);
    the quaternion is renormalized after every step.
    """
    obs = np.asarray(observed_landmarks, dtype=np.float64)
    if obs.shape != (len(model.landmark_indices), 2) or not np.all(np.isfinite(obs)):
        raise ValueError("observed landmarks must be a finite (66, 2) array")
    if init is not None:
        starts = [init]
    elif config.init == "posit":
        # a single start occasionally settles in a basin several degrees off
        starts = [posit_init(obs, model, camera, config.weights, rounds=n) for n in config.posit_rounds]
    else:
        starts = [FaceParams.neutral(model)]
    results = [_descend(obs, model, camera, config, s) for s in starts]
    return min(results, key=lambda r: r.loss)


def _descend(obs, model: MorphableModel, camera: Camera, config: FitConfig, init: FaceParams) -> FitResult:
    mi, me = model.n_id, model.n_exp
    qs = slice(mi + me, mi + me + 4)
    w = config.weights
    theta = np.concatenate([init.alpha, init.beta, init.rotation, init.translation]).astype(np.float64)

    def unpack(th):
        return FaceParams(th[:mi].copy(), th[mi:mi + me].copy(), th[qs] / np.linalg.norm(th[qs]),
                          th[mi + me + 4:].copy())

    full = np.ones(len(model.landmark_indices))
    fixed = (~model.contour_mask).astype(np.float64)
    phases, budgets = [], []
    for mask, n in ((fixed, config.warmup), (full, config.iterations)):
        while n > 0:
            # restart (re-whiten) every `restart` iterations from the best point
            phases.append(mask)
            budgets.append(min(n, config.restart))
            n -= config.restart
    if not phases:  # zero budget: just evaluate the initial point
        phases, budgets = [full], [0]

    history: list[float] = []
    best, best_loss, total = unpack(theta), np.inf, 0
    for lm_mask, budget in zip(phases, budgets):
        theta0 = np.concatenate([best.alpha, best.beta, best.rotation, best.translation])
        transform = (_whitening(model, camera, obs, theta0, w, lm_mask) if config.whiten
                     else np.eye(len(theta0)))
        inverse = np.linalg.inv(transform)
        z = np.zeros(len(theta0))
        state = AdadeltaState.like(z, config.rho, config.eps, config.lr)
        phase_hist: list[float] = []
        best, best_loss = unpack(theta0), np.inf
        for it in range(budget + 1):
            th = theta0 + transform @ z
            fp = unpack(th)
            if lm_mask is full:
                mesh = pose_to_camera(build_mesh(model, fp.alpha, fp.beta), fp)
                idx = rebind_contour(mesh, camera, model, obs)
            else:
                idx = model.landmark_indices
            loss, grads = objective(model, camera, obs, idx, fp.alpha, fp.beta, th[qs],
                                    fp.translation, w, landmark_mask=lm_mask)
            if not np.isfinite(loss):
                raise FitDivergedError(total + it, loss)
            phase_hist.append(loss)
            if loss < best_loss:
                best, best_loss = fp, loss
            if it == budget:
                break
            if it >= config.patience:
                old = phase_hist[-1 - config.patience]
                if old - best_loss <= config.tol * max(old, 1e-300):
                    break
            adadelta_step(state, z, transform.T @ np.concatenate(grads))
            th = theta0 + transform @ z
            th[qs] /= np.linalg.norm(th[qs])
            z[:] = inverse @ (th - theta0)
        total += it
        history += phase_hist

    mesh = pose_to_camera(build_mesh(model, best.alpha, best.beta), best)
    pred = landmarks_2d(mesh, camera, model, observed=obs)
    rmse = float(np.sqrt(np.mean(np.sum((pred - obs) ** 2, axis=1))))
    return FitResult(best, float(best_loss), total, rmse, history)
