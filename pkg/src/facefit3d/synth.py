"""Self-contained synthetic data: fabricated models, renders, datasets.

The fabricated face is a hemi-ellipsoidal grid whose identity and
expression modes are smooth sinusoidal deformation fields along the
surface normal and tangent directions; distinct frequency/direction
assignments keep the modes numerically distinguishable.  Images are
z-buffered flat-shaded renders, and "detected" landmarks are the exact
projections of the true shape plus Gaussian noise, so every sample comes
with exact ground truth.

Dataset layout on disk: ``manifest.json`` plus ``images/*.pgm``,
``landmarks/*.json`` and ``gt/*.json``, all file coordinates in the
usual top-left-origin pixel frame.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import camera
from .cascade import TrainingSample
from .errors import FormatError
from .features import Image, load_image, save_pgm
from .kernels import rasterize
from .landmarks import LandmarkSet, read_landmark_file, write_landmark_file
from .model import BilinearModel, ShapeParams, landmark_positions, synthesize

logger = logging.getLogger(__name__)

EXPRESSION_CLASSES = (
    "neutral", "anger", "disgust", "fear", "happy", "sadness", "surprise",
)

_ELLIPSOID_RADII = (1.0, 1.3, 0.8)
_FIELD_AMP_ID = 0.12
_FIELD_AMP_EXP = 0.10
_FIELD_AMP_CROSS = 0.02
_BASE_SIGMA = 0.02  # spread of the leading (base-shape) mode coefficient


@dataclass
class SynthConfig:
    """Knobs for model fabrication and dataset sampling."""

    seed: int = 0
    n_samples: int = 500
    d_id: int = 8
    d_exp: int = 5
    grid_u: int = 20
    grid_v: int = 20
    yaw_range: tuple = (-45.0, 45.0)
    pitch_range: tuple = (-10.0, 10.0)
    roll_range: tuple = (-10.0, 10.0)
    scale_range: tuple = (55.0, 75.0)
    translation_jitter: float = 15.0
    landmark_sigma: float = 1.5
    image_size: int = 256
    yaw_classes: tuple = (0, 10, 20, 30, 45, 90)
    light_dir: tuple = (0.3, 0.25, 1.0)

    def __post_init__(self):
        for name in ("yaw_range", "pitch_range", "roll_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: {(lo, hi)}")
        if self.scale_range[0] <= 0:
            raise ValueError("scale must stay positive")
        if self.landmark_sigma < 0:
            raise ValueError("landmark_sigma must be nonnegative")
        if self.d_id < 2 or self.d_exp < 2 or self.grid_u < 8 or self.grid_v < 8:
            raise ValueError("model dimensions too small for a usable face")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    @property
    def n_vertices(self) -> int:
        return self.grid_u * self.grid_v


def _surface_frames(config: SynthConfig):
    """Grid coordinates, base positions, and unit normal/tangent fields."""
    rx, ry, rz = _ELLIPSOID_RADII
    u = np.linspace(-1.1, 1.1, config.grid_u)
    v = np.linspace(-1.2, 1.2, config.grid_v)
    uu, vv = np.meshgrid(u, v)  # (grid_v, grid_u), vertex index = iv*grid_u+iu
    uu = uu.ravel()
    vv = vv.ravel()
    pos = np.stack(
        [rx * np.cos(vv) * np.sin(uu), ry * np.sin(vv), rz * np.cos(vv) * np.cos(uu)],
        axis=1,
    )

    def _unit(a):
        return a / np.linalg.norm(a, axis=1, keepdims=True)

    normal = _unit(pos / np.square(np.array(_ELLIPSOID_RADII)))
    tan_u = _unit(
        np.stack(
            [rx * np.cos(vv) * np.cos(uu), np.zeros_like(uu),
             -rz * np.cos(vv) * np.sin(uu)], axis=1,
        )
    )
    tan_v = _unit(
        np.stack(
            [-rx * np.sin(vv) * np.sin(uu), ry * np.cos(vv),
             -rz * np.sin(vv) * np.cos(uu)], axis=1,
        )
    )
    return uu, vv, pos, (normal, tan_u, tan_v)


def _grid_faces(gu: int, gv: int) -> np.ndarray:
    faces = []
    for iv in range(gv - 1):
        for iu in range(gu - 1):
            a = iv * gu + iu
            b = a + 1
            c = a + gu
            d = c + 1
            faces.append((a, b, d))
            faces.append((a, d, c))
    return np.asarray(faces, dtype=np.int64)


def _freq_pairs():
    """Nonzero cosine frequency pairs ordered from smooth to wiggly."""
    pairs = [p for p in itertools.product(range(0, 12), range(0, 12))
             if p != (0, 0)]
    return sorted(pairs, key=lambda p: (p[0] + p[1], p))


_FREQ_PAIRS = _freq_pairs()


def _deformation_field(config: SynthConfig, frames, mode_index: int, amp: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Smooth deformation field; one unique (frequency, direction) per mode.

    The scalar part is a product of discrete-cosine modes, exactly
    orthogonal across distinct frequency pairs on the uniform grid; the
    direction cycles through normal and the two tangents, so distinct
    modes stay uncorrelated by construction.
    """
    gu, gv = config.grid_u, config.grid_v
    fu, fv = _FREQ_PAIRS[(mode_index // 3) % len(_FREQ_PAIRS)]
    direction = frames[mode_index % 3]
    iu = np.arange(gu)
    iv = np.arange(gv)
    cu = np.cos(np.pi * fu * (iu + 0.5) / gu)
    cv = np.cos(np.pi * fv * (iv + 0.5) / gv)
    scalar = (cv[:, None] * cu[None, :]).ravel()  # vertex index = iv*gu+iu
    sign = 1.0 if rng.random() < 0.5 else -1.0
    jitter = 0.8 + 0.4 * rng.random()
    return (sign * jitter * amp * scalar[:, None] * direction).ravel()


def _landmark_grid_indices(config: SynthConfig, count: int = 66) -> np.ndarray:
    margin = 2
    rows = np.arange(margin, config.grid_v - margin)
    cols = np.arange(margin, config.grid_u - margin)
    interior = (rows[:, None] * config.grid_u + cols[None, :]).ravel()
    if len(interior) < count:
        raise ValueError("grid too small to place the landmarks")
    pick = np.round(np.linspace(0, len(interior) - 1, count)).astype(np.int64)
    return interior[pick]


def make_synthetic_model(config: SynthConfig) -> BilinearModel:
    """Fabricate a bilinear model with distinguishable deformation modes."""
    rng = np.random.default_rng(config.seed)
    uu, vv, pos, frames = _surface_frames(config)
    n3 = 3 * config.n_vertices

    core = np.zeros((n3, config.d_id, config.d_exp))
    core[:, 0, 0] = pos.ravel()
    mode = 0
    id_fields = []
    for i in range(1, config.d_id):
        f = _deformation_field(config, frames, mode, _FIELD_AMP_ID, rng)
        core[:, i, 0] = f
        id_fields.append(f)
        mode += 1
    exp_fields = []
    for j in range(1, config.d_exp):
        f = _deformation_field(config, frames, mode, _FIELD_AMP_EXP, rng)
        core[:, 0, j] = f
        exp_fields.append(f)
        mode += 1
    for i in range(1, config.d_id):
        for j in range(1, config.d_exp):
            core[:, i, j] = _deformation_field(
                config, frames, mode, _FIELD_AMP_CROSS, rng
            )
            mode += 1

    fields = np.stack(id_fields + exp_fields)
    corr = np.corrcoef(fields)
    worst = np.max(np.abs(corr - np.eye(len(fields))))
    if worst > 0.5:
        raise ValueError(
            f"deformation modes are not distinguishable (|corr| up to {worst:.3f})"
        )

    mu_id = np.zeros(config.d_id)
    mu_id[0] = 1.0
    mu_exp = np.zeros(config.d_exp)
    mu_exp[0] = 1.0
    var_id = np.ones(config.d_id)
    var_id[0] = _BASE_SIGMA ** 2
    var_exp = np.ones(config.d_exp)
    var_exp[0] = _BASE_SIGMA ** 2

    return BilinearModel(
        core=core,
        mu_id=mu_id,
        mu_exp=mu_exp,
        var_id=var_id,
        var_exp=var_exp,
        landmark_indices=_landmark_grid_indices(config),
        faces=_grid_faces(config.grid_u, config.grid_v),
    )


def _sample_with_info(model: BilinearModel, config: SynthConfig,
                      rng: np.random.Generator):
    alpha = rng.normal(model.mu_id, np.sqrt(model.var_id))
    beta = rng.normal(model.mu_exp, np.sqrt(model.var_exp))
    yaw = rng.uniform(*config.yaw_range)
    pitch = rng.uniform(*config.pitch_range)
    roll = rng.uniform(*config.roll_range)
    scale = rng.uniform(*config.scale_range)
    center = (config.image_size - 1) / 2.0
    translation = center + rng.uniform(
        -config.translation_jitter, config.translation_jitter, size=2
    )
    pose = camera.CameraPose(
        scale=scale,
        rotation=camera.rotation_from_angles(
            np.radians(yaw), np.radians(pitch), np.radians(roll)
        ),
        translation=translation,
    )
    params = ShapeParams(alpha, beta)
    info = {"yaw_deg": float(yaw), "pitch_deg": float(pitch),
            "roll_deg": float(roll)}
    return params, pose, info


def sample_ground_truth(model: BilinearModel, config: SynthConfig,
                        rng: np.random.Generator):
    """Draw true parameters from the prior and a pose from the config ranges."""
    params, pose, _ = _sample_with_info(model, config, rng)
    return params, pose


def yaw_class(yaw_deg: float, classes) -> int:
    """Nearest configured class to the absolute yaw angle."""
    classes = np.asarray(classes, dtype=np.float64)
    return int(classes[np.argmin(np.abs(classes - abs(yaw_deg)))])


def expression_class(model: BilinearModel, params: ShapeParams,
                     threshold: float = 0.6) -> str:
    """Deterministic label from the dominant whitened expression component.

    The leading mode carries the base shape, so classification uses the
    remaining components; weak deviations are "neutral".
    """
    dev = (params.beta - model.mu_exp) / np.sqrt(model.var_exp)
    dev = dev[1:]
    j = int(np.argmax(np.abs(dev)))
    if abs(dev[j]) < threshold:
        return EXPRESSION_CLASSES[0]
    index = 1 + 2 * (j % 3) + (1 if dev[j] > 0 else 0)
    return EXPRESSION_CLASSES[index]


def render(model: BilinearModel, params: ShapeParams, pose: camera.CameraPose,
           image_size: int, light_dir=(0.3, 0.25, 1.0)) -> Image:
    """Flat-shaded z-buffered render of the posed shape on black background.

    ``light_dir`` is in camera coordinates (+z toward the viewer), so
    shading changes with head pose.
    """
    verts = synthesize(model, params).positions
    proj = camera.project(pose, verts)
    depth = camera.camera_depth(pose, verts)

    tri = model.faces
    e1 = verts[tri[:, 1]] - verts[tri[:, 0]]
    e2 = verts[tri[:, 2]] - verts[tri[:, 0]]
    normals = np.cross(e1, e2)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 0
    normals[ok] /= norms[ok, None]
    cam_normals = normals @ pose.rotation.T
    front = ok & (cam_normals[:, 2] > 0.0)

    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = np.maximum(0.0, cam_normals[front] @ light)
    pixels = rasterize(
        proj, depth, tri[front], shade, image_size, image_size
    )
    return Image(pixels)


def generate_dataset(model: BilinearModel, config: SynthConfig,
                     out_dir=None):
    """Render ``n_samples`` supervised samples; optionally write them out.

    Returns ``(samples, manifest)``.  Generation is a pure function of
    the model and ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    samples = []
    records = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        for sub in ("images", "landmarks", "gt"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)

    for idx in range(config.n_samples):
        params, pose, info = _sample_with_info(model, config, rng)
        image = render(model, params, pose, config.image_size, config.light_dir)
        exact = camera.project(pose, landmark_positions(model, params))
        noisy = exact + rng.normal(0.0, config.landmark_sigma, size=exact.shape)
        lmset = LandmarkSet(noisy, source_tag="synthetic")
        sample_id = f"s{idx:04d}"
        samples.append(
            TrainingSample(image=image, landmarks=lmset, g_star=params,
                           sample_id=sample_id)
        )
        record = {
            "id": sample_id,
            "image": f"images/{sample_id}.pgm",
            "landmarks": f"landmarks/{sample_id}.json",
            "gt": f"gt/{sample_id}.json",
            "yaw_deg": info["yaw_deg"],
            "yaw_class": yaw_class(info["yaw_deg"], config.yaw_classes),
            "expression_class": expression_class(model, params),
        }
        records.append(record)

        if out_dir is not None:
            save_pgm(image, out_dir / record["image"])
            write_landmark_file(
                out_dir / record["landmarks"],
                lmset.to_pixel_coords(config.image_size),
                record["image"],
                "synthetic",
            )
            exact_px = exact.copy()
            exact_px[:, 1] = (config.image_size - 1) - exact_px[:, 1]
            gt_doc = {
                "alpha": params.alpha.tolist(),
                "beta": params.beta.tolist(),
                "pose": {
                    "scale": pose.scale,
                    "rotation": pose.rotation.tolist(),
                    "translation": pose.translation.tolist(),
                },
                "landmarks_exact": exact_px.tolist(),
                **info,
                "yaw_class": record["yaw_class"],
                "expression_class": record["expression_class"],
            }
            with open(out_dir / record["gt"], "w") as fh:
                json.dump(gt_doc, fh, sort_keys=True)
                fh.write("\n")

    manifest = {
        "format": "facefit3d-dataset",
        "version": 1,
        "seed": config.seed,
        "n_samples": config.n_samples,
        "image_size": config.image_size,
        "model_fingerprint": model.fingerprint().hex(),
        "yaw_classes": list(config.yaw_classes),
        "samples": records,
    }
    if out_dir is not None:
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        logger.info("wrote %d samples to %s", config.n_samples, out_dir)
    return samples, manifest


def load_dataset(path):
    """Read a dataset directory back into memory; returns (samples, manifest)."""
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError("manifest", f"no manifest.json under {path}")
    except json.JSONDecodeError as exc:
        raise FormatError("manifest", f"invalid JSON: {exc}")
    if manifest.get("format") != "facefit3d-dataset":
        raise FormatError("format", "not a facefit3d dataset manifest")

    samples = []
    for rec in manifest["samples"]:
        image = load_image(path / rec["image"])
        lm_doc = read_landmark_file(path / rec["landmarks"])
        lmset = LandmarkSet.from_pixel_coords(
            lm_doc["pixel_points"], image.height, lm_doc["source_tag"]
        )
        with open(path / rec["gt"]) as fh:
            gt = json.load(fh)
        params = ShapeParams(np.asarray(gt["alpha"]), np.asarray(gt["beta"]))
        samples.append(
            TrainingSample(image=image, landmarks=lmset, g_star=params,
                           sample_id=rec["id"])
        )
    return samples, manifest
