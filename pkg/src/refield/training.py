"""Reflectance training on a synthetic light-stage dataset.

Geometry is fitted once per view from its landmarks and then frozen. Each
sample pairs a relit source view with one target OLAT (possibly from another
camera); the predicted UV texture is rendered into the target view and
compared with the photometric L1 loss. Gradients flow back through the
rasterizer adjoint into the perceptron, one sample per step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .adadelta import AdadeltaState, adadelta_step
from .dataset import Dataset
from .fitting import FitConfig, fit_geometry
from .geometry import compute_vertex_normals, posed_mesh
from .losses import LossWeights, photometric_l1, photometric_l1_grad, pyramid_l2, pyramid_l2_grad, si_mse
from .raster import FrameBuffer, TextureMap, backprop_texture, rasterize_geometry, render_texture, \
    render_uv_attribute, unproject_to_uv
from .reflectance import (N_FEATURES, PredictorInput, TexelPerceptron, predict_analytic,
                          predictor_backward, predictor_forward)
from .transport import BRDFParams

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 5
    batch_size: int = 1
    lr: float = 0.05
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    hidden: int = 64
    val_identities: int = 1  # held out from the end of the identity list
    uv_size: int | None = None  # defaults to the dataset's
    geometry: str = "fit"  # or "truth"
    feature_loss: bool = False  # pyramid surrogate for the perceptual term
    max_train_samples: int | None = None  # per epoch, after shuffling

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.geometry not in ("fit", "truth"):
            raise ValueError(f"unknown geometry mode {self.geometry!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class View:
    mesh: object
    fb: FrameBuffer
    normals: TextureMap
    light_dirs: np.ndarray


@dataclass(frozen=True)
class Sample:
    identity: str
    source_camera: str
    env: str
    target_camera: str
    light: int

    @property
    def same_pose(self) -> bool:
        return self.source_camera == self.target_camera


class TrainingData:
    """Per-view geometry, UV maps and images, prepared once."""

    def __init__(self, data: Dataset, config: TrainConfig):
        self.data = data
        self.config = config
        self.uv_size = config.uv_size or data.config.uv_size
        self.views: dict[tuple[str, str], View] = {}
        self.sources: dict[tuple[str, str, str], TextureMap] = {}
        self._olats: dict[tuple[str, str, int], np.ndarray] = {}
        model = data.model
        fit_cfg = FitConfig()
        for ident, cam in product(data.identities, data.cameras):
            truth, camera, _, landmarks = data.view_info(ident, cam)
            params = truth if config.geometry == "truth" else \
                fit_geometry(landmarks, model, camera, fit_cfg).params
            mesh = posed_mesh(model, params)
            fb = rasterize_geometry(mesh, camera)
            fb.texture_shape = (self.uv_size, self.uv_size)
            nmap = render_uv_attribute(mesh, compute_vertex_normals(mesh), self.uv_size, normalize=True)
            self.views[ident, cam] = View(mesh, fb, nmap, data.light_dirs(cam))
            for env in data.env_names:
                self.sources[ident, cam, env] = unproject_to_uv(
                    data.relit(ident, cam, env), mesh, camera, self.uv_size, fb=fb)

    def target(self, s: Sample) -> np.ndarray:
        key = (s.identity, s.target_camera, s.light)
        if key not in self._olats:
            self._olats[key] = self.data.olat(*key)
        return self._olats[key]

    def input(self, s: Sample) -> PredictorInput:
        src = self.views[s.identity, s.source_camera]
        tgt = self.views[s.identity, s.target_camera]
        return PredictorInput(self.sources[s.identity, s.source_camera, s.env], src.normals,
                              tgt.normals, tgt.light_dirs[s.light])

    def samples(self, identities) -> list[Sample]:
        d = self.data
        return [Sample(i, cs, e, ct, k) for i in identities for cs in d.cameras
                for e in d.env_names for ct in d.cameras for k in range(len(d.rig))]


def split_identities(data: Dataset, config: TrainConfig) -> tuple[list[str], list[str]]:
    ids = data.identities
    n_val = config.val_identities
    if n_val < 1 or n_val >= len(ids):
        raise ValueError(f"need 1 <= val_identities < {len(ids)}")
    return ids[:-n_val], ids[-n_val:]


def sample_loss(net: TexelPerceptron, td: TrainingData, s: Sample, weights: LossWeights,
                feature_loss: bool = False, backward: bool = False):
    """Loss of one sample; with ``backward`` also the parameter gradients."""
    inp = td.input(s)
    view = td.views[s.identity, s.target_camera]
    tex = predictor_forward(net, inp)
    img = render_texture(view.fb, tex.data)
    target = td.target(s)
    mask = view.fb.mask
    loss = weights.photometric * photometric_l1(img, target, mask)
    if feature_loss:
        loss += weights.feature * pyramid_l2(img, target, mask)
    if not backward:
        return loss, img
    g_img = weights.photometric * photometric_l1_grad(img, target, mask)
    if feature_loss:
        g_img += weights.feature * pyramid_l2_grad(img, target, mask)
    g_tex = backprop_texture(view.fb, g_img, (td.uv_size, td.uv_size))
    return loss, predictor_backward(net, inp, g_tex)


def evaluate(net: TexelPerceptron, td: TrainingData, samples, config: TrainConfig) -> tuple[float, float]:
    """Mean loss and mean Si-MSE over ``samples``."""
    losses, errs = [], []
    for s in samples:
        loss, img = sample_loss(net, td, s, config.weights, config.feature_loss)
        losses.append(loss)
        errs.append(si_mse(img, td.target(s), td.views[s.identity, s.target_camera].fb.mask))
    return float(np.mean(losses)), float(np.mean(errs))


def baseline_si_mse(td: TrainingData, samples) -> float:
    """Si-MSE of the Lambertian predictor given the true albedo."""
    errs = []
    albedo = {}
    for s in samples:
        if s.identity not in albedo:
            albedo[s.identity] = BRDFParams(td.data.albedo(s.identity))
        view = td.views[s.identity, s.target_camera]
        tex = predict_analytic(td.input(s), albedo[s.identity])
        img = render_texture(view.fb, tex.data)
        errs.append(si_mse(img, td.target(s), view.fb.mask))
    return float(np.mean(errs))


@dataclass
class TrainResult:
    net: TexelPerceptron
    log: list[dict]
    baseline_si_mse: float | None = None


def train(dataset, config: TrainConfig = TrainConfig(), td: TrainingData | None = None,
          with_baseline: bool = True) -> TrainResult:
    data = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    train_ids, val_ids = split_identities(data, config)
    td = td or TrainingData(data, config)
    train_samples = td.samples(train_ids)
    val_samples = td.samples(val_ids)
    net = TexelPerceptron.initialize(config.seed, (N_FEATURES, config.hidden, config.hidden, 3))
    state = AdadeltaState.like(net.parameters, config.rho, config.eps, config.lr)

    rows = []
    tr0, _ = evaluate(net, td, train_samples[:config.max_train_samples], config)
    v0, vs0 = evaluate(net, td, val_samples, config)
    rows.append({"epoch": 0, "train_loss": tr0, "val_loss": v0, "val_si_mse": vs0})
    log.info("epoch 0: train %.5f val %.5f si-mse %.6f", tr0, v0, vs0)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
        if config.max_train_samples:
            order = order[:config.max_train_samples]
        total = 0.0
        for step, idx in enumerate(order):
            s = train_samples[idx]
            loss, grads = sample_loss(net, td, s, config.weights, config.feature_loss, backward=True)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, step {step}, sample {s}")
            adadelta_step(state, net.parameters, grads)
            net.touch()
            total += loss
        val_loss, val_si = evaluate(net, td, val_samples, config)
        rows.append({"epoch": epoch, "train_loss": total / len(order), "val_loss": val_loss,
                     "val_si_mse": val_si})
        log.info("epoch %d: train %.5f val %.5f si-mse %.6f", epoch, rows[-1]["train_loss"],
                 val_loss, val_si)
    base = baseline_si_mse(td, val_samples) if with_baseline else None
    return TrainResult(net, rows, base)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "val_si_mse"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
