"""Parameter and pose initialization from detected 2D landmarks.

Alternates a linear pose solve against the current shape with
closed-form ridge solves of the identity and expression blocks.  The
data term is squared so each block solve is exact; a guard keeps the
previous pose whenever a pose re-solve would raise the monitored
objective, making the objective trace non-increasing by construction.

Landmark files are JSON ``{image, landmarks, source_tag}`` with pixel
coordinates (origin top-left, y down).  In-memory landmark sets use the
internal y-up frame; conversion happens once at ingestion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import camera
from .errors import FormatError, NumericalRankError
from .model import BilinearModel, ShapeParams, landmark_positions, mean_params

_TINY = 1e-30


@dataclass
class LandmarkSet:
    """Detected 2D landmarks ordered to match the model's landmark indices.

    ``points`` are in the internal y-up pixel frame.
    """

    points: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must be an (L, 2) array")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_pixel_coords(cls, points_px, image_height: int,
                          source_tag: str = "") -> "LandmarkSet":
        """Ingest top-left-origin pixel coordinates, flipping y once."""
        pts = np.asarray(points_px, dtype=np.float64).copy()
        pts[:, 1] = (image_height - 1) - pts[:, 1]
        return cls(pts, source_tag)

    def to_pixel_coords(self, image_height: int) -> np.ndarray:
        pts = self.points.copy()
        pts[:, 1] = (image_height - 1) - pts[:, 1]
        return pts


def write_landmark_file(path, pixel_points, image: str, source_tag: str = "") -> None:
    """One sample per file; landmarks in pixel coordinates, origin top-left."""
    doc = {
        "image": image,
        "landmarks": [[float(x), float(y)] for x, y in np.asarray(pixel_points)],
        "source_tag": source_tag,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_landmark_file(path) -> dict:
    """Returns ``{"image", "pixel_points", "source_tag"}``; y still image-down."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError("landmarks", f"invalid JSON: {exc}") from exc
    for key in ("image", "landmarks", "source_tag"):
        if key not in doc:
            raise FormatError(key, "missing from landmark file")
    pts = np.asarray(doc["landmarks"], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FormatError("landmarks", "expected a list of [x, y] pairs")
    return {"image": doc["image"], "pixel_points": pts,
            "source_tag": doc["source_tag"]}


@dataclass
class FitConfig:
    """Weights and loop controls for landmark-based initialization."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    max_alternations: int = 5
    rel_tol: float = 1e-6

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.max_alternations < 1:
            raise ValueError("max_alternations must be positive")


def _check_landmarks(model: BilinearModel, landmarks: LandmarkSet):
    if len(landmarks) != model.n_landmarks:
        raise ValueError(
            f"landmark count {len(landmarks)} does not match model "
            f"({model.n_landmarks})"
        )


def init_pose(model: BilinearModel, landmarks: LandmarkSet) -> camera.CameraPose:
    """Pose from detected landmarks against the mean-parameter shape."""
    _check_landmarks(model, landmarks)
    mean_lm = landmark_positions(model, mean_params(model))
    return camera.solve_pose(landmarks.points, mean_lm)


def fit_objective(
    model: BilinearModel,
    landmarks: LandmarkSet,
    params: ShapeParams,
    pose: camera.CameraPose,
    config: FitConfig,
) -> float:
    """Squared reprojection error plus the two variance-weighted priors."""
    proj = camera.project(pose, landmark_positions(model, params))
    data = float(np.sum((landmarks.points - proj) ** 2))
    da = params.alpha - model.mu_id
    db = params.beta - model.mu_exp
    return (
        data
        + config.lambda1 * float(np.sum(da * da / model.var_id))
        + config.lambda2 * float(np.sum(db * db / model.var_exp))
    )


def solve_params_given_pose(
    model: BilinearModel,
    landmarks: LandmarkSet,
    pose: camera.CameraPose,
    config: FitConfig,
    free: str,
    current: ShapeParams,
) -> ShapeParams:
    """Exact ridge solve of one parameter block with the other held fixed.

    With one block fixed the landmark projections are affine in the free
    block, so the minimizer solves normal equations with a diagonal
    Tikhonov term weighted by the reciprocal parameter variances.
    """
    _check_landmarks(model, landmarks)
    if free == "alpha":
        basis = model.landmark_core() @ current.beta
        lam, mu, var = config.lambda1, model.mu_id, model.var_id
    elif free == "beta":
        basis = np.einsum("vij,i->vj", model.landmark_core(), current.alpha)
        lam, mu, var = config.lambda2, model.mu_exp, model.var_exp
    else:
        raise ValueError(f"free must be 'alpha' or 'beta', got {free!r}")

    L = model.n_landmarks
    d = basis.shape[1]
    a2 = pose.scale * pose.rotation[:2]
    design = np.einsum("rc,lcd->lrd", a2, basis.reshape(L, 3, d)).reshape(2 * L, d)
    target = (landmarks.points - pose.translation).ravel()

    q = 1.0 / var
    normal = design.T @ design + lam * np.diag(q)
    rhs = design.T @ target + lam * (q * mu)
    try:
        solution = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalRankError(
            f"normal matrix for {free} solve is singular: {exc}"
        ) from exc
    if free == "alpha":
        return ShapeParams(solution, current.beta.copy())
    return ShapeParams(current.alpha.copy(), solution)


def landmark_fit(
    model: BilinearModel,
    landmarks: LandmarkSet,
    config: FitConfig | None = None,
    history: list | None = None,
) -> tuple[ShapeParams, camera.CameraPose]:
    """Alternating initialization of shape parameters and pose.

    Pass ``history`` (a list) to capture the per-round objective trace;
    it is appended once at initialization and once per alternation.
    """
    config = config or FitConfig()
    _check_landmarks(model, landmarks)
    params = mean_params(model)
    pose = init_pose(model, landmarks)
    obj = fit_objective(model, landmarks, params, pose, config)
    if history is not None:
        history.append(obj)

    for _ in range(config.max_alternations):
        params = solve_params_given_pose(model, landmarks, pose, config,
                                         "alpha", params)
        params = solve_params_given_pose(model, landmarks, pose, config,
                                         "beta", params)
        candidate = camera.solve_pose(
            landmarks.points, landmark_positions(model, params)
        )
        if (
            fit_objective(model, landmarks, params, candidate, config)
            <= fit_objective(model, landmarks, params, pose, config)
        ):
            pose = candidate
        new_obj = fit_objective(model, landmarks, params, pose, config)
        if history is not None:
            history.append(new_obj)
        if obj - new_obj <= config.rel_tol * max(obj, _TINY):
            obj = new_obj
            break
        obj = new_obj
    return params, pose
