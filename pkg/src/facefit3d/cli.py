"""Command-line pipeline: model-gen, data-gen, train, fit, eval, prep.

Configuration resolves in three layers: built-in defaults, then a
line-oriented ``key=value`` config file (``--config``), then explicit
flags.  Unknown config keys are rejected.  Every command exits nonzero
with a one-line diagnostic on failure; ``--seed`` fully determines all
stochastic outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import cascade as casc
from . import dataprep, metrics, synth
from .errors import FaceFitError
from .features import HogConfig, load_image
from .landmarks import FitConfig, LandmarkSet, landmark_fit, read_landmark_file
from .model import load_model, save_model, save_obj, synthesize
from .synth import SynthConfig


@dataclass
class RunConfig:
    """Every tunable default, overridable by file and flags."""

    seed: int = 0
    threads: int = 1
    # synthetic model / dataset
    n_samples: int = 500
    d_id: int = 8
    d_exp: int = 5
    grid_u: int = 20
    grid_v: int = 20
    yaw_min: float = -45.0
    yaw_max: float = 45.0
    pitch_min: float = -10.0
    pitch_max: float = 10.0
    roll_min: float = -10.0
    roll_max: float = 10.0
    scale_min: float = 55.0
    scale_max: float = 75.0
    translation_jitter: float = 15.0
    landmark_sigma: float = 1.5
    image_size: int = 256
    # landmark fitting
    lambda1: float = 0.5
    lambda2: float = 0.5
    max_alternations: int = 5
    rel_tol: float = 1e-6
    # cascade
    stages: int = 5
    lambda_r: float = 100.0
    rp_dim: int = 0
    rp_seed: int = 0
    # features
    patch_size: int = 64
    cell_size: int = 8
    block_cells: int = 2
    block_stride_cells: int = 1
    orientation_bins: int = 9
    clip: float = 0.2
    epsilon: float = 1e-6
    normalize_ld: bool = True
    scale_patch: bool = False
    # scan preparation
    icp_iterations: int = 30
    w_lm: float = 10.0
    # evaluation
    center_fraction: float = 0.6
    ced_points: int = 50

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            seed=self.seed,
            n_samples=self.n_samples,
            d_id=self.d_id,
            d_exp=self.d_exp,
            grid_u=self.grid_u,
            grid_v=self.grid_v,
            yaw_range=(self.yaw_min, self.yaw_max),
            pitch_range=(self.pitch_min, self.pitch_max),
            roll_range=(self.roll_min, self.roll_max),
            scale_range=(self.scale_min, self.scale_max),
            translation_jitter=self.translation_jitter,
            landmark_sigma=self.landmark_sigma,
            image_size=self.image_size,
        )

    def fit_config(self) -> FitConfig:
        return FitConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            max_alternations=self.max_alternations,
            rel_tol=self.rel_tol,
        )

    def hog_config(self) -> HogConfig:
        return HogConfig(
            patch_size=self.patch_size,
            cell_size=self.cell_size,
            block_cells=self.block_cells,
            block_stride_cells=self.block_stride_cells,
            orientation_bins=self.orientation_bins,
            clip=self.clip,
            epsilon=self.epsilon,
            normalize_ld=self.normalize_ld,
            scale_patch=self.scale_patch,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    if ftype in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if ftype in ("int", int):
        return int(raw)
    return float(raw)


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, raw = (t.strip() for t in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    return values


def build_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    config = RunConfig(**values)
    # Trip module invariants now rather than mid-run.
    config.synth_config()
    config.fit_config()
    config.hog_config()
    return config


def _add_config_flags(parser, names):
    parser.add_argument("--config", help="key=value config file")
    for name in names:
        default = getattr(RunConfig, name)
        ftype = _FIELD_TYPES[name]
        flag = "--" + name.replace("_", "-")
        if ftype in ("bool", bool):
            parser.add_argument(
                flag, type=lambda s, k=name: _parse_value(k, s),
                default=None, metavar="BOOL",
                help=f"default: {default}",
            )
        else:
            pytype = int if ftype in ("int", int) else float
            parser.add_argument(flag, type=pytype, default=None,
                                help=f"default: {default}")
    return parser


_SYNTH_KEYS = [
    "seed", "n_samples", "d_id", "d_exp", "grid_u", "grid_v",
    "yaw_min", "yaw_max", "pitch_min", "pitch_max", "roll_min", "roll_max",
    "scale_min", "scale_max", "translation_jitter", "landmark_sigma",
    "image_size",
]
_FITTING_KEYS = ["lambda1", "lambda2", "max_alternations", "rel_tol"]
_HOG_KEYS = [
    "patch_size", "cell_size", "block_cells", "block_stride_cells",
    "orientation_bins", "clip", "epsilon", "normalize_ld", "scale_patch",
]
_CASCADE_KEYS = ["stages", "lambda_r", "rp_dim", "rp_seed", "threads"]


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_model_gen(args) -> int:
    config = build_config(args)
    model = synth.make_synthetic_model(config.synth_config())
    save_model(model, args.out)
    if not Path(args.out).exists():
        raise OSError(f"failed to write {args.out}")
    print(
        f"model-gen: wrote {args.out}: {model.n_vertices} vertices, "
        f"d_id={model.d_id}, d_exp={model.d_exp}, "
        f"{model.n_landmarks} landmarks, {len(model.faces)} faces"
    )
    return 0


def cmd_data_gen(args) -> int:
    config = build_config(args)
    model = load_model(_require(args.model, "model"))
    out = Path(args.out)
    _, manifest = synth.generate_dataset(model, config.synth_config(), out)
    for rec in manifest["samples"]:
        for key in ("image", "landmarks", "gt"):
            if not (out / rec[key]).exists():
                raise OSError(f"declared output missing: {rec[key]}")
    print(f"data-gen: wrote {manifest['n_samples']} samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    model = load_model(_require(args.model, "model"))
    samples, manifest = synth.load_dataset(_require(args.dataset, "dataset"))
    if manifest["model_fingerprint"] != model.fingerprint().hex():
        raise FaceFitError("dataset was generated against a different model")
    regressor = casc.train(
        model,
        samples,
        stages=config.stages,
        lambda_r=config.lambda_r,
        hog_config=config.hog_config(),
        fit_config=config.fit_config(),
        rp_dim=config.rp_dim,
        rp_seed=config.rp_seed,
        n_threads=config.threads,
    )
    casc.save_cascade(regressor, args.out)
    log_path = Path(str(args.out) + ".log.json")
    with open(log_path, "w") as fh:
        json.dump(
            {
                "stages": regressor.n_stages,
                "lambda_r": config.lambda_r,
                "n_samples": len(samples),
                "rms_whitened_error": regressor.training_log,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    for k, err in enumerate(regressor.training_log):
        tag = "init" if k == 0 else f"stage {k}"
        print(f"train: {tag}: rms whitened error {err:.6f}")
    print(f"train: wrote {args.out} and {log_path}")
    return 0


def cmd_fit(args) -> int:
    config = build_config(args)
    model = load_model(_require(args.model, "model"))
    regressor = casc.load_cascade(_require(args.cascade, "cascade"), model=model)
    image = load_image(_require(args.image, "image"))
    lm_doc = read_landmark_file(_require(args.landmarks, "landmark file"))
    landmarks = LandmarkSet.from_pixel_coords(
        lm_doc["pixel_points"], image.height, lm_doc["source_tag"]
    )
    result = casc.fit_image(regressor, model, image, landmarks)
    if not result.ok:
        raise FaceFitError(result.message)
    params_path = Path(str(args.out_prefix) + ".params.json")
    obj_path = Path(str(args.out_prefix) + ".obj")
    doc = {
        "alpha": result.params.alpha.tolist(),
        "beta": result.params.beta.tolist(),
        "pose": {
            "scale": result.pose.scale,
            "rotation": result.pose.rotation.tolist(),
            "translation": result.pose.translation.tolist(),
        },
    }
    with open(params_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_obj(obj_path, result.shape, model.faces)
    print(f"fit: wrote {params_path} and {obj_path}")
    return 0


def cmd_eval(args) -> int:
    config = build_config(args)
    model = load_model(_require(args.model, "model"))
    regressor = casc.load_cascade(_require(args.cascade, "cascade"), model=model)
    samples, manifest = synth.load_dataset(_require(args.dataset, "dataset"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    masks = {
        "center": metrics.center_mask(model, config.center_fraction),
        "whole": metrics.whole_mask(model.n_vertices),
    }
    by_id = {rec["id"]: rec for rec in manifest["samples"]}

    def _one(sample):
        gt_shape = synthesize(model, sample.g_star)
        init_params, _ = landmark_fit(model, sample.landmarks,
                                      regressor.fit_config)
        init_shape = synthesize(model, init_params)
        result = casc.fit_image(regressor, model, sample.image,
                                sample.landmarks)
        if not result.ok:
            raise FaceFitError(
                f"sample {sample.sample_id}: {result.message}"
            )
        rec = by_id[sample.sample_id]
        return {
            "id": sample.sample_id,
            "yaw_class": rec["yaw_class"],
            "expression_class": rec["expression_class"],
            "rmse_center": metrics.rmse_z(gt_shape, result.shape, masks["center"]),
            "rmse_whole": metrics.rmse_z(gt_shape, result.shape, masks["whole"]),
            "mae_center": metrics.mae(gt_shape, result.shape, masks["center"]),
            "mae_whole": metrics.mae(gt_shape, result.shape, masks["whole"]),
            "mae_init_whole": metrics.mae(gt_shape, init_shape, masks["whole"]),
        }

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            records = list(pool.map(_one, samples))
    else:
        records = [_one(s) for s in samples]

    fieldnames = ["id", "yaw_class", "expression_class", "rmse_center",
                  "rmse_whole", "mae_center", "mae_whole", "mae_init_whole"]
    metrics.write_per_sample_csv(out_dir / "per_sample.csv", records, fieldnames)

    mae_whole = [r["mae_whole"] for r in records]
    yaw_table = metrics.aggregate_by_class(
        mae_whole, [r["yaw_class"] for r in records]
    )
    expr_table = metrics.aggregate_by_class(
        mae_whole, [r["expression_class"] for r in records]
    )
    metrics.write_class_csv(out_dir / "per_yaw.csv", yaw_table)
    metrics.write_class_csv(out_dir / "per_expression.csv", expr_table)

    for mask_name in ("center", "whole"):
        errs = [r[f"rmse_{mask_name}"] for r in records]
        hi = max(errs)
        thresholds = np.linspace(0.0, hi if hi > 0 else 1.0, config.ced_points)
        metrics.write_ced_csv(out_dir / f"ced_{mask_name}.csv", thresholds,
                              metrics.ced(errs, thresholds))

    summary = {
        "n_samples": len(records),
        "mean_rmse_center": float(np.mean([r["rmse_center"] for r in records])),
        "mean_rmse_whole": float(np.mean([r["rmse_whole"] for r in records])),
        "mean_mae_center": float(np.mean([r["mae_center"] for r in records])),
        "mean_mae_whole": float(np.mean(mae_whole)),
        "mean_mae_init_whole": float(
            np.mean([r["mae_init_whole"] for r in records])
        ),
        "expression_max_rel_diff": expr_table.max_rel_diff,
        "mae_by_yaw_class": {str(l): m for l, _, m in yaw_table.rows},
    }
    summary["cascade_vs_init_ratio"] = (
        summary["mean_mae_whole"] / summary["mean_mae_init_whole"]
        if summary["mean_mae_init_whole"] > 0 else float("nan")
    )
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"eval: {len(records)} samples; mean MAE whole "
        f"{summary['mean_mae_whole']:.6f} (init "
        f"{summary['mean_mae_init_whole']:.6f}, ratio "
        f"{summary['cascade_vs_init_ratio']:.3f})"
    )
    print(f"eval: per-class max relative MAE difference "
          f"(expressions): {expr_table.max_rel_diff:.4%}")
    print(f"eval: wrote tables to {out_dir}")
    return 0


def cmd_prep(args) -> int:
    config = build_config(args)
    model = load_model(_require(args.model, "model"))
    points = dataprep.load_ply(_require(args.cloud, "point cloud"))
    lm3d = dataprep.read_landmark3d_file(
        _require(args.landmarks3d, "3D landmark sidecar")
    )
    cloud = dataprep.PointCloud(points=points, landmark3d=lm3d)
    params, transform, trace = dataprep.icp_fit(
        model,
        cloud,
        iterations=config.icp_iterations,
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        w_lm=config.w_lm,
    )
    doc = {
        "alpha": params.alpha.tolist(),
        "beta": params.beta.tolist(),
        "transform": {
            "scale": transform.scale,
            "rotation": transform.rotation.tolist(),
            "translation": transform.translation.tolist(),
        },
        "residual_trace": trace,
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"prep: {len(trace)} iterations, final residual {trace[-1]:.6e}; "
          f"wrote {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facefit3d",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model-gen", help="fabricate a synthetic bilinear model")
    p.add_argument("--out", required=True, help="output model file")
    _add_config_flags(p, ["seed", "d_id", "d_exp", "grid_u", "grid_v"])
    p.set_defaults(func=cmd_model_gen)

    p = sub.add_parser("data-gen", help="render a synthetic supervised dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_config_flags(p, _SYNTH_KEYS)
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train", help="train the cascade on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output cascade file")
    _add_config_flags(p, _CASCADE_KEYS + _FITTING_KEYS + _HOG_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit one image + landmark file")
    p.add_argument("--model", required=True)
    p.add_argument("--cascade", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out-prefix", required=True,
                   help="writes <prefix>.params.json and <prefix>.obj")
    _add_config_flags(p, [])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a cascade against a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--cascade", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p, ["threads", "center_fraction", "ced_points"]
                      + _FITTING_KEYS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prep", help="fit ground-truth parameters to a 3D scan")
    p.add_argument("--model", required=True)
    p.add_argument("--cloud", required=True, help="ASCII PLY point cloud")
    p.add_argument("--landmarks3d", required=True,
                   help="JSON sidecar with labeled 3D landmarks")
    p.add_argument("--out", required=True, help="output parameter JSON")
    _add_config_flags(p, ["icp_iterations", "w_lm", "lambda1", "lambda2"])
    p.set_defaults(func=cmd_prep)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FaceFitError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
