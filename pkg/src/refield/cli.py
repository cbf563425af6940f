"""``refield`` command line: one binary, several subcommands.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command prints a JSON summary on stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger("refield")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth-dataset", "fit-geometry", "render-olat", "relight", "estimate-light", "train", "eval")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _schema() -> dict:
    with resources.files("refield").joinpath("schemas/summary.schema.json").open() as fh:
        return json.load(fh)


def validate_summary(summary: dict) -> None:
    import jsonschema

    jsonschema.validate(summary, _schema())


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def set_threads(n: int | None) -> int:
    import numba

    if n is None:
        env = os.environ.get("REFIELD_THREADS")
        n = int(env) if env else None
    if n is None:
        return numba.get_num_threads()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def _load_config(path, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    extra = set(cfg) - allowed
    if extra:
        raise UsageError(f"unknown config keys in {path}: {sorted(extra)}")
    return cfg


def _vector(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from exc
    if v.shape != (3,):
        raise argparse.ArgumentTypeError(f"expected 3 components, got {text!r}")
    return v


def _load_model(path):
    from .morphable import load_model, synthetic_model

    return load_model(path) if path else synthetic_model()


def _read_params(path):
    """FaceParams (and camera, if present) from a params JSON file."""
    from .morphable import Camera, FaceParams

    with open(path) as fh:
        doc = json.load(fh)
    if "params" in doc:
        cam = Camera.from_dict(doc["camera"]) if "camera" in doc else None
        return FaceParams.from_dict(doc["params"]), cam, doc
    return FaceParams.from_dict(doc), None, doc


def _olat_dir(path) -> tuple[np.ndarray, list[str]]:
    from .imagefiles import load_image

    d = Path(path)
    files = sorted(d.glob("olat_*.pfm"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise DataError(f"no olat_<k>.pfm files in {d}")
    imgs = []
    for f in files:
        img = load_image(f)
        if img.ndim != 3 or (imgs and img.shape != imgs[0].shape):
            raise DataError(f"OLAT {f} has shape {img.shape}, expected {imgs[0].shape if imgs else '(H, W, 3)'}")
        imgs.append(img)
    return np.stack(imgs).astype(np.float64), [str(f) for f in files]


def _rig_for(n: int, path):
    from .transport import LightRig

    if path is None:
        return LightRig.fibonacci(n)
    with open(path) as fh:
        doc = json.load(fh)
    dirs = doc["rig"]["directions"] if "rig" in doc else doc["directions"]
    rig = LightRig(np.array(dirs))
    if len(rig) != n:
        raise DataError(f"{path} lists {len(rig)} lights but {n} OLATs were found")
    return rig


# ---------------------------------------------------------------- commands


def cmd_synth(args, out: dict):
    from .dataset import SynthConfig, file_count, synthesize_dataset

    cfg = _load_config(args.config, set(SynthConfig.__dataclass_fields__))
    for key in ("identities", "cameras", "lights", "envs", "image_size", "uv_size", "env_dir"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.analytic:
        cfg["ground_truth"] = "analytic"
    try:
        config = SynthConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = synthesize_dataset(config, args.out)
    n_olat, n_params = file_count(manifest)
    mpath = Path(args.out) / "manifest.json"
    out["outputs"].append(str(mpath))
    out["metrics"].update(olat_files=n_olat, param_files=n_params, manifest_sha256=_sha256(mpath))


def cmd_fit(args, out: dict):
    from .fitting import FitConfig, fit_geometry
    from .morphable import Camera

    model = _load_model(args.model)
    with open(args.landmarks) as fh:
        doc = json.load(fh)
    obs = np.asarray(doc["landmarks"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if obs.shape != (model.landmark_indices.size, 2) or not np.all(np.isfinite(obs)):
        raise DataError(f"{args.landmarks}: expected {model.landmark_indices.size} finite (x, y) landmarks")
    camera = Camera.from_dict(doc["camera"]) if isinstance(doc, dict) and "camera" in doc \
        else Camera.default(args.image_size)
    cfg = FitConfig(iterations=args.iterations) if args.iterations else FitConfig()
    res = fit_geometry(obs, model, camera, cfg)
    with open(args.out, "w") as fh:
        json.dump({"params": res.params.to_dict(), "camera": camera.to_dict()}, fh, indent=1, sort_keys=True)
    out["outputs"].append(args.out)
    out["metrics"].update(loss=res.loss, landmark_rmse=res.landmark_rmse, iterations=res.iterations)


def cmd_render(args, out: dict):
    from .geometry import posed_mesh
    from .imagefiles import load_image, save_image
    from .morphable import Camera
    from .raster import TextureMap
    from .transport import BRDFParams, shade_olat

    model = _load_model(args.model)
    params, cam, _ = _read_params(args.params)
    camera = cam or Camera.default(args.image_size)
    if args.albedo:
        a = load_image(args.albedo)
        albedo = TextureMap(np.clip(a, 0, 1).astype(np.float32), np.ones(a.shape[:2], bool))
    else:
        albedo = TextureMap.constant(0.6, 64)
    light = np.asarray(args.light, dtype=np.float64)
    if np.linalg.norm(light) == 0:
        raise UsageError("--light must be non-zero")
    light = light / np.linalg.norm(light)
    brdf = BRDFParams(albedo, args.specular, args.shininess)
    img = shade_olat(posed_mesh(model, params), brdf, light, camera, shadows=not args.no_shadows)
    save_image(args.out, img)
    out["outputs"].append(args.out)
    out["metrics"].update(mean_radiance=float(img.mean()), width=camera.width, height=camera.height)


def cmd_relight(args, out: dict):
    from .imagefiles import load_image, save_image
    from .transport import EnvMap, project_env_to_lights, relight_sum

    imgs, _ = _olat_dir(args.olat_dir)
    rig = _rig_for(len(imgs), args.rig)
    if args.weights:
        with open(args.weights) as fh:
            lam = np.array(json.load(fh)["weights"], dtype=np.float64)
    elif args.env:
        env = load_image(args.env)
        if env.ndim != 3 or env.shape[2] != 3:
            raise DataError(f"{args.env}: environment map must be RGB")
        lam = project_env_to_lights(EnvMap(np.maximum(env.astype(np.float64), 0)), rig, args.projection)
    else:
        raise UsageError("relight needs --env or --weights")
    if len(lam) != len(imgs):
        raise DataError(f"{len(lam)} weights for {len(imgs)} OLATs")
    img = relight_sum(imgs, lam)
    save_image(args.out, img)
    out["outputs"].append(args.out)
    out["metrics"].update(lights=len(imgs), mean_radiance=float(img.mean()))


def cmd_estimate(args, out: dict):
    from .imagefiles import load_image
    from .lightest import estimate_light_lsq, photometric_objective, refine_light, save_light

    imgs, files = _olat_dir(args.olat_dir)
    target = load_image(args.target).astype(np.float64)
    if target.shape != imgs.shape[1:]:
        raise DataError(f"target {args.target} has shape {target.shape} but OLAT {files[0]} has {imgs.shape[1:]}")
    mask = None
    if args.mask:
        m = load_image(args.mask)
        mask = (m if m.ndim == 2 else m[..., 0]) > 0.5
        if mask.shape != target.shape[:2]:
            raise DataError(f"mask {args.mask} has shape {mask.shape}, expected {target.shape[:2]}")
    rig = _rig_for(len(imgs), args.rig)
    sol = estimate_light_lsq(imgs, target, mask, ridge=args.ridge, nonneg=args.nonneg)
    if args.refine_steps:
        sol = refine_light(sol, photometric_objective(imgs, target, mask), args.refine_steps)
    save_light(args.out, sol, rig)
    out["outputs"].append(args.out)
    out["metrics"].update(residual=sol.residual, condition=sol.condition, ridge=sol.ridge)


def cmd_train(args, out: dict):
    from .reflectance import save_network
    from .training import TrainConfig, train, write_log

    allowed = set(TrainConfig.__dataclass_fields__) - {"weights"}
    cfg = _load_config(args.config, allowed)
    for key in ("epochs", "lr", "uv_size", "geometry", "max_train_samples"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        config = TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    res = train(args.dataset, config, with_baseline=not args.no_baseline)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_network(outdir / "weights.rfnn", res.net)
    write_log(outdir / "train_log.csv", res.log)
    out["outputs"] += [str(outdir / "weights.rfnn"), str(outdir / "train_log.csv")]
    last = res.log[-1]
    out["metrics"].update(epochs=config.epochs, train_loss=last["train_loss"], val_loss=last["val_loss"],
                          val_si_mse=last["val_si_mse"], baseline_si_mse=res.baseline_si_mse,
                          weights_sha256=_sha256(outdir / "weights.rfnn"))


def cmd_eval(args, out: dict):
    from .dataset import Dataset
    from .evaluation import EvalRecord, eval_report
    from .imagefiles import load_image
    from .raster import render_texture
    from .reflectance import load_network, predictor_forward_values
    from .training import TrainConfig, TrainingData, split_identities

    data = Dataset(args.dataset)
    config = TrainConfig(geometry=args.geometry)
    _, val_ids = split_identities(data, config)
    ids = data.identities if args.all_identities else val_ids
    records = []
    if args.weights:
        net = load_network(args.weights)
        td = TrainingData(data, config)
        for s in td.samples(ids):
            view = td.views[s.identity, s.target_camera]
            pred = render_texture(view.fb, predictor_forward_values(net, td.input(s)))
            records.append(EvalRecord(f"{s.identity}/{s.source_camera}/{s.env}/{s.target_camera}/{s.light}",
                                      s.same_pose, pred, td.target(s), view.fb.mask))
    elif args.predictions:
        root = Path(args.predictions)
        files = sorted(root.glob("*/*_to_*/olat_*.pfm"))
        if not files:
            raise DataError(f"no predictions found under {root}")
        for f in files:
            ident = f.parent.parent.name
            src, tgt = f.parent.name.split("_to_")
            k = int(f.stem.split("_")[1])
            try:
                target = data.olat(ident, tgt, k)
            except (KeyError, IndexError) as exc:
                raise DataError(f"prediction {f} has no ground-truth pair") from exc
            records.append(EvalRecord(str(f.relative_to(root)), src == tgt, load_image(f), target,
                                      np.any(target > 0, axis=2) if args.nonzero_mask else None))
    else:
        raise UsageError("eval needs --weights or --predictions")
    summary = eval_report(records, args.out)
    out["outputs"].append(args.out)
    for split, (mean, std, n) in summary.items():
        out["metrics"].update({f"{split}_mean": mean, f"{split}_std": std, f"{split}_count": n})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refield", description="Face reflectance fields at desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--seed", type=int, default=None, help="RNG seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (fallback: REFIELD_THREADS)")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--verbose", action="store_true")

    s = sub.add_parser("synth-dataset", help="render a synthetic light-stage dataset")
    common(s, "dataset directory")
    s.add_argument("--config", help="JSON file with dataset config keys")
    s.add_argument("--identities", type=int)
    s.add_argument("--cameras", type=int)
    s.add_argument("--lights", type=int)
    s.add_argument("--envs", type=int)
    s.add_argument("--image-size", dest="image_size", type=int)
    s.add_argument("--uv-size", dest="uv_size", type=int)
    s.add_argument("--env-dir", dest="env_dir")
    s.add_argument("--analytic", action="store_true", help="Lambert-only realizable ground truth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-geometry", help="fit model parameters to 66 landmarks")
    common(s, "output params JSON")
    s.add_argument("--model", help=".rfmm file (default: built-in synthetic model)")
    s.add_argument("--landmarks", required=True, help="JSON list of 66 [x, y] or a params.json")
    s.add_argument("--image-size", dest="image_size", type=int, default=128)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render-olat", help="render one point-light image")
    common(s, "output image (.pfm/.png/.hdr)")
    s.add_argument("--model")
    s.add_argument("--params", required=True)
    s.add_argument("--light", type=_vector, required=True, help="direction x,y,z (camera frame)")
    s.add_argument("--albedo")
    s.add_argument("--image-size", dest="image_size", type=int, default=128)
    s.add_argument("--specular", type=float, default=0.35)
    s.add_argument("--shininess", type=float, default=24.0)
    s.add_argument("--no-shadows", dest="no_shadows", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("relight", help="weighted sum of OLATs under an environment map")
    common(s, "output image")
    s.add_argument("--olat-dir", dest="olat_dir", required=True)
    s.add_argument("--env", help="environment map (.hdr/.pfm)")
    s.add_argument("--weights", help="light JSON from estimate-light")
    s.add_argument("--rig", help="manifest or light JSON with rig directions")
    s.add_argument("--projection", choices=("point", "cells"), default="point")
    s.set_defaults(func=cmd_relight)

    s = sub.add_parser("estimate-light", help="least-squares OLAT weights for a target image")
    common(s, "output light JSON")
    s.add_argument("--olat-dir", dest="olat_dir", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--mask")
    s.add_argument("--rig")
    s.add_argument("--ridge", type=float)
    s.add_argument("--nonneg", action="store_true")
    s.add_argument("--refine-steps", dest="refine_steps", type=int, default=0)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("train", help="train the texel perceptron")
    common(s, "output directory for weights.rfnn and train_log.csv")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="JSON file with training config keys")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--uv-size", dest="uv_size", type=int)
    s.add_argument("--geometry", choices=("fit", "truth"))
    s.add_argument("--max-train-samples", dest="max_train_samples", type=int)
    s.add_argument("--no-baseline", dest="no_baseline", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="Si-MSE report split by same/different pose")
    common(s, "output CSV")
    s.add_argument("--dataset", required=True)
    s.add_argument("--weights")
    s.add_argument("--predictions", help="directory <identity>/<src>_to_<tgt>/olat_<k>.pfm")
    s.add_argument("--geometry", choices=("fit", "truth"), default="fit")
    s.add_argument("--all-identities", dest="all_identities", action="store_true")
    s.add_argument("--nonzero-mask", dest="nonzero_mask", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def run_command(argv=None) -> int:
    from .fitting import FitDivergedError
    from .imagefiles import ImageFormatError

    argv = list(sys.argv[1:] if argv is None else argv)
    out = {"schema_version": 1, "command": None, "status": "ok", "exit_code": EXIT_OK,
           "outputs": [], "metrics": {}}
    code = EXIT_OK
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        out["command"] = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        out["metrics"]["threads"] = set_threads(args.threads)
        if args.seed is not None:
            np.random.seed(args.seed)
        args.func(args, out)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (FloatingPointError, np.linalg.LinAlgError, FitDivergedError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (DataError, OSError, ImageFormatError, KeyError, ValueError, json.JSONDecodeError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    if code:
        out.update(status="error", exit_code=code, error=msg)
        print(msg, file=sys.stderr)
    validate_summary(out)
    print(json.dumps(out, sort_keys=True))
    return code


def main() -> None:
    sys.exit(run_command())
