"""Cascaded feature regression of shape-parameter residues.

Each stage maps the standardized joint feature to a whitened parameter
update through affine ridge regression; after every update the pose is
re-solved linearly from the detected landmarks and the updated shape.
Training and inference share the single-sample code path, so refitting a
training image reproduces its final training-time parameters exactly.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import camera
from .errors import (
    FaceFitError,
    FingerprintMismatchError,
    FormatError,
    VersionError,
)
from .features import FeatureVector, HogConfig, Image, joint_feature
from .landmarks import FitConfig, LandmarkSet, landmark_fit
from .model import BilinearModel, Shape, ShapeParams, landmark_positions, synthesize

logger = logging.getLogger(__name__)

CASCADE_MAGIC = b"CSC1"
CASCADE_VERSION = 1

_SCALE_FLOOR = 1e-8


@dataclass
class RegressorStage:
    """One affine refinement step on standardized features.

    ``weights``/``bias`` act on ``(f - feature_mean) / feature_scale`` and
    produce whitened residues, which ``param_scale`` maps back to raw
    parameter units.  ``rp_dim``/``rp_seed`` describe the optional seeded
    random projection of the HOG part (0 disables it).
    """

    weights: np.ndarray
    bias: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    param_scale: np.ndarray
    rp_dim: int = 0
    rp_seed: int = 0

    def apply(self, feature: np.ndarray) -> np.ndarray:
        """Parameter update (raw units) for one standardizable feature vector."""
        z = (feature - self.feature_mean) / self.feature_scale
        return (z @ self.weights + self.bias) * self.param_scale


@dataclass
class CascadeRegressor:
    stages: list
    hog_config: HogConfig
    fit_config: FitConfig
    model_fingerprint: bytes
    training_log: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("a cascade needs at least one stage")

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclass
class TrainingSample:
    """One supervised pair: image, detected landmarks, true parameters."""

    image: Image
    landmarks: LandmarkSet
    g_star: ShapeParams
    sample_id: str = ""


@dataclass
class FitResult:
    """Outcome of fitting one image; ``ok`` is False on landmark-fit failure."""

    ok: bool
    params: ShapeParams | None = None
    pose: camera.CameraPose | None = None
    shape: Shape | None = None
    message: str = ""


def ridge_fit(
    X: np.ndarray, Y: np.ndarray, lambda_r: float, method: str = "auto"
) -> tuple[np.ndarray, np.ndarray]:
    """Affine ridge regression with an unpenalized intercept.

    Solves the column-centered problem; when ``N < d`` (or forced) the
    dual identity ``W = Xc^T (Xc Xc^T + lambda I)^{-1} Yc`` keeps the
    linear system at ``N x N``.  Returns ``(weights, bias)`` such that
    predictions are ``X @ weights + bias``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError("X and Y must be 2-D with matching row counts")
    if len(X) < 1:
        raise ValueError("need at least one row")
    if lambda_r <= 0:
        raise ValueError("lambda_r must be positive")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite training data")

    n, d = X.shape
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    Xc = X - xm
    Yc = Y - ym
    if method == "auto":
        method = "dual" if n < d else "primal"
    if method == "dual":
        gram = Xc @ Xc.T
        gram[np.diag_indices_from(gram)] += lambda_r
        W = Xc.T @ np.linalg.solve(gram, Yc)
    elif method == "primal":
        normal = Xc.T @ Xc
        normal[np.diag_indices_from(normal)] += lambda_r
        W = np.linalg.solve(normal, Xc.T @ Yc)
    else:
        raise ValueError(f"unknown method {method!r}")
    bias = ym - xm @ W
    return W, bias


def _projection_matrix(config: HogConfig, n_landmarks: int,
                       rp_dim: int, rp_seed: int) -> np.ndarray | None:
    """Shared per-landmark Gaussian projection; None when disabled."""
    if rp_dim <= 0:
        return None
    per_landmark = max(1, rp_dim // n_landmarks)
    rng = np.random.default_rng(rp_seed)
    P = rng.standard_normal((per_landmark, config.descriptor_size))
    return P / np.sqrt(per_landmark)


def _project(fv: FeatureVector, proj: np.ndarray | None,
             n_landmarks: int, desc: int) -> np.ndarray:
    if proj is None:
        return fv.stacked()
    reduced = (fv.hog.reshape(n_landmarks, desc) @ proj.T).ravel()
    return np.concatenate([reduced, fv.ld])


def _extract(model, sample, params, pose, hog_config, proj):
    fv = joint_feature(sample.image, model, params, pose, sample.landmarks,
                       hog_config)
    return _project(fv, proj, model.n_landmarks, hog_config.descriptor_size)


def _pmap(fn, items, n_threads: int):
    if n_threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


def whitened_error(g_star: ShapeParams, g: ShapeParams,
                   param_scale: np.ndarray) -> float:
    diff = (g_star.stacked() - g.stacked()) / param_scale
    return float(np.linalg.norm(diff))


def train(
    model: BilinearModel,
    samples: list,
    stages: int = 5,
    lambda_r: float = 100.0,
    hog_config: HogConfig | None = None,
    fit_config: FitConfig | None = None,
    rp_dim: int = 0,
    rp_seed: int = 0,
    n_threads: int = 1,
) -> CascadeRegressor:
    """Train the cascade on supervised samples.

    Every sample is initialized by landmark fitting; samples whose
    initialization fails are dropped with a warning.  Per stage: extract
    features at the current estimates, fit ridge on whitened residues,
    apply the update sample by sample, then re-solve each pose from the
    detected landmarks and the updated shape.  The returned regressor
    carries a per-stage RMS whitened-error log (entry 0 = after
    initialization).
    """
    if stages < 1:
        raise ValueError("stages must be >= 1")
    if len(samples) < 2:
        raise ValueError("need at least 2 training samples")
    hog_config = hog_config or HogConfig()
    fit_config = fit_config or FitConfig()
    proj = _projection_matrix(hog_config, model.n_landmarks, rp_dim, rp_seed)

    def _init(sample):
        try:
            params, pose = landmark_fit(model, sample.landmarks, fit_config)
            return sample, params, pose
        except FaceFitError as exc:
            logger.warning("dropping sample %r: initialization failed (%s)",
                           sample.sample_id, exc)
            return None

    initialized = [r for r in _pmap(_init, samples, n_threads) if r is not None]
    if len(initialized) < 2:
        raise ValueError("fewer than 2 samples survived initialization")
    kept = [s for s, _, _ in initialized]
    states = [(p, c) for _, p, c in initialized]

    n = len(kept)
    param_scale = model.param_scale()
    d_param = len(param_scale)
    if proj is None:
        d_feat = hog_config.feature_length(model.n_landmarks)
    else:
        d_feat = proj.shape[0] * model.n_landmarks + 2 * model.n_landmarks

    def _rms() -> float:
        errs = [
            whitened_error(s.g_star, p, param_scale)
            for s, (p, _) in zip(kept, states)
        ]
        return float(np.sqrt(np.mean(np.square(errs))))

    log = [_rms()]
    logger.info("cascade training: %d samples, %d features, %d stages",
                n, d_feat, stages)

    X = np.empty((n, d_feat))
    stage_list = []
    for k in range(stages):
        rows = _pmap(
            lambda j: _extract(model, kept[j], states[j][0], states[j][1],
                               hog_config, proj),
            range(n),
            n_threads,
        )
        for j, row in enumerate(rows):
            X[j] = row
        fmean = X.mean(axis=0)
        fstd = X.std(axis=0)
        fscale = np.where(fstd < _SCALE_FLOOR, 1.0, fstd)
        X -= fmean
        X /= fscale

        Y = np.stack(
            [
                (s.g_star.stacked() - p.stacked()) / param_scale
                for s, (p, _) in zip(kept, states)
            ]
        )
        W, b = ridge_fit(X, Y, lambda_r)
        stage = RegressorStage(
            weights=W,
            bias=b,
            feature_mean=fmean,
            feature_scale=fscale,
            param_scale=param_scale.copy(),
            rp_dim=rp_dim,
            rp_seed=rp_seed,
        )
        stage_list.append(stage)

        # Per-sample update through the same arithmetic inference uses.
        for j in range(n):
            delta = (X[j] @ W + b) * param_scale
            g_new = ShapeParams.from_stacked(
                states[j][0].stacked() + delta, model.d_id, model.d_exp
            )
            pose = camera.solve_pose(
                kept[j].landmarks.points, landmark_positions(model, g_new)
            )
            states[j] = (g_new, pose)
        log.append(_rms())
        logger.info("stage %d/%d: rms whitened error %.6f -> %.6f",
                    k + 1, stages, log[-2], log[-1])

    return CascadeRegressor(
        stages=stage_list,
        hog_config=hog_config,
        fit_config=fit_config,
        model_fingerprint=model.fingerprint(),
        training_log=log,
    )


def fit_image(
    regressor: CascadeRegressor,
    model: BilinearModel,
    image: Image,
    landmarks: LandmarkSet,
    force: bool = False,
) -> FitResult:
    """Fit one image: landmark initialization, then the trained stages.

    Raises :class:`FingerprintMismatchError` when the regressor was
    trained against a different model (unless ``force``); landmark-fit
    failures come back as a non-ok :class:`FitResult` rather than an
    exception.
    """
    if not force and regressor.model_fingerprint != model.fingerprint():
        raise FingerprintMismatchError(
            "cascade was trained against a different model; pass force=True "
            "to override"
        )
    try:
        params, pose = landmark_fit(model, landmarks, regressor.fit_config)
    except FaceFitError as exc:
        return FitResult(ok=False, message=f"landmark fit failed: {exc}")

    hog_config = regressor.hog_config
    for stage in regressor.stages:
        proj = _projection_matrix(hog_config, model.n_landmarks,
                                  stage.rp_dim, stage.rp_seed)
        fv = joint_feature(image, model, params, pose, landmarks, hog_config)
        f = _project(fv, proj, model.n_landmarks, hog_config.descriptor_size)
        delta = stage.apply(f)
        params = ShapeParams.from_stacked(
            params.stacked() + delta, model.d_id, model.d_exp
        )
        pose = camera.solve_pose(
            landmarks.points, landmark_positions(model, params)
        )
    return FitResult(
        ok=True, params=params, pose=pose, shape=synthesize(model, params)
    )


# ---------------------------------------------------------------------------
# Serialization: "CSC1" container.

_CASC_HEADER = struct.Struct("<4sI4I")
_HOG_FIELDS = struct.Struct("<5I2d2B")
_FIT_FIELDS = struct.Struct("<2dId")
_STAGE_HEADER = struct.Struct("<iQ")


def save_cascade(regressor: CascadeRegressor, path) -> None:
    hc, fc = regressor.hog_config, regressor.fit_config
    d_feat = len(regressor.stages[0].feature_mean)
    d_param = len(regressor.stages[0].param_scale)
    with open(path, "wb") as fh:
        fh.write(
            _CASC_HEADER.pack(
                CASCADE_MAGIC, CASCADE_VERSION, regressor.n_stages,
                d_feat, d_param, len(regressor.training_log),
            )
        )
        fh.write(
            _HOG_FIELDS.pack(
                hc.patch_size, hc.cell_size, hc.block_cells,
                hc.block_stride_cells, hc.orientation_bins,
                hc.clip, hc.epsilon,
                int(hc.normalize_ld), int(hc.scale_patch),
            )
        )
        fh.write(_FIT_FIELDS.pack(fc.lambda1, fc.lambda2,
                                  fc.max_alternations, fc.rel_tol))
        fh.write(regressor.model_fingerprint)
        fh.write(np.asarray(regressor.training_log, dtype="<f8").tobytes())
        for st in regressor.stages:
            fh.write(_STAGE_HEADER.pack(st.rp_dim, st.rp_seed))
            for arr in (st.feature_mean, st.feature_scale,
                        st.weights.ravel(), st.bias, st.param_scale):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(fh, name, nbytes):
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError(name, f"expected {nbytes} bytes, file truncated")
    return raw


def load_cascade(path, model: BilinearModel | None = None,
                 force: bool = False) -> CascadeRegressor:
    """Load a cascade; verifies the model fingerprint when a model is given."""
    with open(path, "rb") as fh:
        magic, version, k, d_feat, d_param, log_len = _CASC_HEADER.unpack(
            _read(fh, "header", _CASC_HEADER.size)
        )
        if magic != CASCADE_MAGIC:
            raise FormatError("magic", f"expected {CASCADE_MAGIC!r}, found {magic!r}")
        if version != CASCADE_VERSION:
            raise VersionError(version, CASCADE_VERSION)
        if k < 1 or k > 10_000:
            raise FormatError("stage_count", f"implausible stage count {k}")
        hv = _HOG_FIELDS.unpack(_read(fh, "hog_config", _HOG_FIELDS.size))
        hog_config = HogConfig(
            patch_size=hv[0], cell_size=hv[1], block_cells=hv[2],
            block_stride_cells=hv[3], orientation_bins=hv[4],
            clip=hv[5], epsilon=hv[6],
            normalize_ld=bool(hv[7]), scale_patch=bool(hv[8]),
        )
        fv = _FIT_FIELDS.unpack(_read(fh, "fit_config", _FIT_FIELDS.size))
        fit_config = FitConfig(lambda1=fv[0], lambda2=fv[1],
                               max_alternations=fv[2], rel_tol=fv[3])
        fingerprint = _read(fh, "fingerprint", 32)
        log = np.frombuffer(
            _read(fh, "training_log", 8 * log_len), dtype="<f8"
        ).tolist()
        stages = []
        for i in range(k):
            rp_dim, rp_seed = _STAGE_HEADER.unpack(
                _read(fh, f"stage{i}", _STAGE_HEADER.size)
            )
            fmean = np.frombuffer(_read(fh, f"stage{i}.feature_mean",
                                        8 * d_feat), dtype="<f8").copy()
            fscale = np.frombuffer(_read(fh, f"stage{i}.feature_scale",
                                         8 * d_feat), dtype="<f8").copy()
            W = np.frombuffer(_read(fh, f"stage{i}.weights",
                                    8 * d_feat * d_param), dtype="<f8")
            W = W.reshape(d_feat, d_param).copy()
            bias = np.frombuffer(_read(fh, f"stage{i}.bias", 8 * d_param),
                                 dtype="<f8").copy()
            pscale = np.frombuffer(_read(fh, f"stage{i}.param_scale",
                                         8 * d_param), dtype="<f8").copy()
            stages.append(
                RegressorStage(
                    weights=W, bias=bias, feature_mean=fmean,
                    feature_scale=fscale, param_scale=pscale,
                    rp_dim=rp_dim, rp_seed=rp_seed,
                )
            )
        if fh.read(1):
            raise FormatError("trailer", "unexpected bytes after last stage")
    regressor = CascadeRegressor(
        stages=stages, hog_config=hog_config, fit_config=fit_config,
        model_fingerprint=fingerprint, training_log=log,
    )
    if model is not None and not force:
        if fingerprint != model.fingerprint():
            raise FingerprintMismatchError(
                "cascade fingerprint does not match the supplied model"
            )
    return regressor
