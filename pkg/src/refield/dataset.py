"""Synthetic light-stage dataset: layout, generation and loading.

Layout::

    <root>/manifest.json
    <root>/model.rfmm
    <root>/envs/<env>.pfm
    <root>/<identity>/albedo.pfm
    <root>/<identity>/<camera>/params.json
    <root>/<identity>/<camera>/olat_<k>.pfm
    <root>/<identity>/<camera>/relit_<env>.pfm
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import (compute_vertex_normals, landmarks_2d, posed_mesh, quat_from_axis_angle,
                       quat_from_euler, quat_from_matrix, quat_multiply, quat_to_matrix)
from .imagefiles import load_image, load_pfm, save_pfm
from .morphable import Camera, FaceParams, MorphableModel, load_model, save_model, synthetic_model
from .raster import TextureMap, rasterize, rasterize_geometry, render_uv_attribute
from .reflectance import PredictorInput, predict_analytic
from .transport import (BRDFParams, EnvMap, LightRig, procedural_envmap, project_env_to_lights,
                        relight_sum, shade_olats)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENV_EXTENSIONS = (".hdr", ".pfm")


@dataclass
class SynthConfig:
    identities: int = 2
    cameras: int = 3
    lights: int = 150
    envs: int = 1
    seed: int = 0
    image_size: int = 128
    uv_size: int = 64
    albedo_size: int = 128
    camera_yaw_span: float = 60.0  # degrees across the camera ring
    pose_jitter: float = 10.0  # degrees of random head rotation
    coefficient_scale: float = 0.8
    specular_strength: float = 0.35
    shininess: float = 24.0
    ambient: float = 0.0
    shadows: bool = True
    ground_truth: str = "brdf"  # or "analytic": OLATs rendered by the Lambert predictor
    env_dir: str | None = None
    env_size: tuple[int, int] = (32, 64)  # height, width of procedural maps
    model: str | None = None

    def __post_init__(self):
        if self.identities < 1 or self.cameras < 1 or self.lights < 1 or self.envs < 0:
            raise ValueError("identities, cameras and lights must be >= 1; envs >= 0")
        if self.ground_truth not in ("brdf", "analytic"):
            raise ValueError(f"unknown ground_truth {self.ground_truth!r}")
        self.env_size = tuple(int(v) for v in self.env_size)

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env_size"] = list(self.env_size)
        return d


def identity_name(i: int) -> str:
    return f"id{i:03d}"


def camera_name(c: int) -> str:
    return f"cam{c:02d}"


def camera_rotations(n: int, span_deg: float) -> list[np.ndarray]:
    """Camera ring around the head: camera c sees the world rotated about y."""
    yaws = [0.0] if n == 1 else np.linspace(-span_deg / 2, span_deg / 2, n)
    return [quat_to_matrix(quat_from_axis_angle([0, 1, 0], np.radians(y))) for y in yaws]


def _rng(cfg: SynthConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


def identity_params(model: MorphableModel, cfg: SynthConfig, i: int) -> FaceParams:
    """World-frame head parameters of identity ``i``."""
    rng = _rng(cfg, 1, i)
    alpha = rng.normal(size=model.n_id) * cfg.coefficient_scale
    beta = rng.normal(size=model.n_exp) * cfg.coefficient_scale
    ang = np.radians(rng.uniform(-cfg.pose_jitter, cfg.pose_jitter, 3) * np.array([1, 0.6, 0.4]))
    t = np.array([0.0, 0.0, 600.0]) + np.append(rng.uniform(-10, 10, 2), rng.uniform(-20, 20))
    return FaceParams(alpha, beta, quat_from_euler(*ang), t)


def identity_albedo(cfg: SynthConfig, i: int) -> TextureMap:
    """Skin-toned albedo with smooth spatial variation, in [0, 1]."""
    rng = _rng(cfg, 2, i)
    n = cfg.albedo_size
    v, u = (np.mgrid[0:n, 0:n] + 0.5) / n
    base = np.array([0.62, 0.44, 0.35]) * rng.uniform(0.65, 1.15)
    base = base * rng.uniform(0.9, 1.1, 3)
    field_ = np.zeros((n, n))
    for _ in range(6):
        k = rng.normal(size=2) * 6.0
        field_ += np.sin(2 * np.pi * (k[0] * u + k[1] * v) + rng.uniform(0, 2 * np.pi)) / 6
    # darker, redder patch around the mouth region of the chart
    r = np.hypot(u - 0.5, v - 0.64)
    lips = np.exp(-0.5 * (r / 0.05) ** 2)[..., None] * np.array([0.05, -0.12, -0.1])
    alb = base * (1 + 0.15 * field_[..., None]) + lips
    return TextureMap(np.clip(alb, 0.02, 0.95).astype(np.float32), np.ones((n, n), bool))


def camera_params(world: FaceParams, r_cam: np.ndarray) -> FaceParams:
    """Head parameters as seen from a camera orbiting the head centre."""
    q = quat_multiply(quat_from_matrix(r_cam), world.rotation)
    return FaceParams(world.alpha, world.beta, q / np.linalg.norm(q), world.translation)


def load_envmaps(cfg: SynthConfig) -> list[tuple[str, EnvMap]]:
    if cfg.env_dir is not None:
        files = sorted(p for p in Path(cfg.env_dir).iterdir() if p.suffix.lower() in ENV_EXTENSIONS) \
            if Path(cfg.env_dir).is_dir() else []
        if not files:
            raise FileNotFoundError(f"no .hdr/.pfm environment maps in {cfg.env_dir}")
        return [(p.stem, EnvMap(np.maximum(load_image(p).astype(np.float64), 0))) for p in files[:cfg.envs or None]]
    h, w = cfg.env_size
    return [(f"env{e:03d}", procedural_envmap(int(_rng(cfg, 3, e).integers(2 ** 31)), w, h))
            for e in range(cfg.envs)]


def plan_dataset(cfg: SynthConfig, env_names: list[str] | None = None) -> dict:
    """Manifest skeleton: every file the generator will write."""
    env_names = env_names if env_names is not None else [f"env{e:03d}" for e in range(cfg.envs)]
    ids = []
    for i in range(cfg.identities):
        iname = identity_name(i)
        views = []
        for c in range(cfg.cameras):
            base = f"{iname}/{camera_name(c)}"
            views.append({"camera": camera_name(c), "params": f"{base}/params.json",
                          "olats": [f"{base}/olat_{k}.pfm" for k in range(cfg.lights)],
                          "relit": {e: f"{base}/relit_{e}.pfm" for e in env_names}})
        ids.append({"id": iname, "albedo": f"{iname}/albedo.pfm", "views": views})
    return {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "model": "model.rfmm",
            "envs": {e: f"envs/{e}.pfm" for e in env_names}, "identities": ids}


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def analytic_olats(mesh, brdf: BRDFParams, rig: LightRig, camera: Camera, uv_size: int) -> np.ndarray:
    """Images of the Lambert predictor, rasterized (the realizable target set)."""
    nmap = render_uv_attribute(mesh, compute_vertex_normals(mesh), uv_size, normalize=True)
    lam_brdf = BRDFParams(brdf.diffuse_albedo)
    fb = rasterize_geometry(mesh, camera)
    blank = TextureMap(np.zeros_like(nmap.data), nmap.valid_mask)
    out = []
    for d in rig.directions:
        tex = predict_analytic(PredictorInput(blank, nmap, nmap, d), lam_brdf)
        out.append(rasterize(mesh, camera, tex, fb=fb).color)
    return np.stack(out).astype(np.float64)


def synthesize_dataset(cfg: SynthConfig, out) -> dict:
    """Render the dataset into ``out`` and return the manifest."""
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output path {root} is not writable: {exc}") from exc
    model = load_model(cfg.model) if cfg.model else synthetic_model()
    envs = load_envmaps(cfg)
    manifest = plan_dataset(cfg, [name for name, _ in envs])
    camera = Camera.default(cfg.image_size)
    rig = LightRig.fibonacci(cfg.lights)
    rotations = camera_rotations(cfg.cameras, cfg.camera_yaw_span)
    manifest["rig"] = {"directions": rig.directions.tolist()}
    manifest["cameras"] = [{"id": camera_name(c), "intrinsics": camera.to_dict(),
                            "rotation": r.tolist()} for c, r in enumerate(rotations)]
    save_model(root / "model.rfmm", model)
    model = load_model(root / "model.rfmm")  # render with the float32 model readers will see
    (root / "envs").mkdir(exist_ok=True)
    weights = {}
    for name, env in envs:
        save_pfm(root / manifest["envs"][name], env.data)
        weights[name] = project_env_to_lights(env, rig)

    for i, entry in enumerate(manifest["identities"]):
        world = identity_params(model, cfg, i)
        albedo = identity_albedo(cfg, i)
        brdf = BRDFParams(albedo, cfg.specular_strength, cfg.shininess, cfg.ambient)
        (root / entry["id"]).mkdir(exist_ok=True)
        save_pfm(root / entry["albedo"], albedo.data)
        for c, view in enumerate(entry["views"]):
            (root / entry["id"] / view["camera"]).mkdir(exist_ok=True)
            params = camera_params(world, rotations[c])
            mesh = posed_mesh(model, params)
            crig = rig.rotated(rotations[c])
            if cfg.ground_truth == "analytic":
                imgs = analytic_olats(mesh, brdf, crig, camera, cfg.uv_size)
            else:
                imgs = shade_olats(mesh, brdf, crig, camera, cfg.shadows).images
            for k, rel in enumerate(view["olats"]):
                save_pfm(root / rel, imgs[k])
            for name, rel in view["relit"].items():
                save_pfm(root / rel, relight_sum(imgs, weights[name]))
            doc = {"params": params.to_dict(), "camera": camera.to_dict(),
                   "camera_rotation": rotations[c].tolist(),
                   "landmarks": landmarks_2d(mesh, camera, model).tolist()}
            _write_json(root / view["params"], doc)
        log.info("identity %s done", entry["id"])
    _write_json(root / "manifest.json", manifest)
    return manifest


class Dataset:
    """Read access to a generated dataset."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"missing manifest {path}")
        with open(path) as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported dataset schema version")
        self.config = SynthConfig.from_dict(self.manifest["config"])
        self.rig = LightRig(np.array(self.manifest["rig"]["directions"]))
        self._model = None
        self._identities = {e["id"]: e for e in self.manifest["identities"]}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise FileNotFoundError(f"dataset file listed in manifest is missing: {p}")
        return p

    @property
    def identities(self) -> list[str]:
        return list(self._identities)

    @property
    def cameras(self) -> list[str]:
        return [c["id"] for c in self.manifest["cameras"]]

    @property
    def env_names(self) -> list[str]:
        return list(self.manifest["envs"])

    @property
    def model(self) -> MorphableModel:
        if self._model is None:
            self._model = load_model(self.path(self.manifest["model"]))
        return self._model

    def _view(self, identity: str, camera: str) -> dict:
        try:
            views = self._identities[identity]["views"]
        except KeyError as exc:
            raise KeyError(f"identity {identity!r} not in manifest") from exc
        for v in views:
            if v["camera"] == camera:
                return v
        raise KeyError(f"camera {camera!r} missing for identity {identity!r}")

    def view_info(self, identity: str, camera: str) -> tuple[FaceParams, Camera, np.ndarray, np.ndarray]:
        """(params, camera, camera rotation, observed landmarks)."""
        with open(self.path(self._view(identity, camera)["params"])) as fh:
            doc = json.load(fh)
        return (FaceParams.from_dict(doc["params"]), Camera.from_dict(doc["camera"]),
                np.array(doc["camera_rotation"]), np.array(doc["landmarks"]))

    def olat(self, identity: str, camera: str, k: int) -> np.ndarray:
        return load_pfm(self.path(self._view(identity, camera)["olats"][k]))

    def relit(self, identity: str, camera: str, env: str) -> np.ndarray:
        return load_pfm(self.path(self._view(identity, camera)["relit"][env]))

    def albedo(self, identity: str) -> TextureMap:
        a = load_pfm(self.path(self._identities[identity]["albedo"]))
        return TextureMap(a, np.ones(a.shape[:2], bool))

    def light_dirs(self, camera: str) -> np.ndarray:
        r = np.array(self.manifest["cameras"][self.cameras.index(camera)]["rotation"])
        return self.rig.directions @ r.T

    def brdf(self, identity: str) -> BRDFParams:
        c = self.config
        return BRDFParams(self.albedo(identity), c.specular_strength, c.shininess, c.ambient)


def file_count(manifest: dict) -> tuple[int, int]:
    """(OLAT files, param files) listed in a manifest."""
    views = [v for e in manifest["identities"] for v in e["views"]]
    return sum(len(v["olats"]) for v in views), len(views)
