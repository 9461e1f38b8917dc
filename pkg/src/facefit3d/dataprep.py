"""Ground-truth parameter preparation from 3D scans.

Fits the bilinear model to a point cloud: landmark-based similarity
alignment for initialization, then iterative closest point with
regularized identity/expression solves.  Correspondences run from model
vertices to their nearest cloud points (template into denser scan), with
a 3x-median distance cutoff per iteration.

Clouds are ingested as ASCII PLY vertex lists plus a JSON sidecar of
labeled 3D landmarks in model landmark order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, FormatError
from .model import BilinearModel, ShapeParams, landmark_positions, mean_params, synthesize

logger = logging.getLogger(__name__)

_TINY = 1e-30


@dataclass
class PointCloud:
    """Scan points plus labeled 3D landmarks (scanner units)."""

    points: np.ndarray
    landmark3d: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.landmark3d = np.asarray(self.landmark3d, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be an (m, 3) array")
        if self.landmark3d.ndim != 2 or self.landmark3d.shape[1] != 3:
            raise ValueError("landmark3d must be an (L, 3) array")
        if len(self.points) < len(self.landmark3d):
            raise ValueError("cloud has fewer points than landmarks")
        if not (np.all(np.isfinite(self.points))
                and np.all(np.isfinite(self.landmark3d))):
            raise ValueError("cloud data must be finite")


@dataclass
class RigidTransform3D:
    """Similarity transform ``p -> scale * R @ p + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.scale = float(self.scale)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation

    def invert_points(self, points: np.ndarray) -> np.ndarray:
        """Map points back into the model frame."""
        return ((np.asarray(points) - self.translation) @ self.rotation) / self.scale


def _weighted_procrustes(src, dst, weights) -> RigidTransform3D:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    mu_s = (w[:, None] * src).sum(axis=0) / total
    mu_d = (w[:, None] * dst).sum(axis=0) / total
    X = src - mu_s
    Y = dst - mu_d
    svals = np.linalg.svd(np.sqrt(w)[:, None] * X, compute_uv=False)
    if len(src) < 3 or svals[1] <= 1e-12 * max(svals[0], 1.0):
        raise DegenerateGeometryError(
            "source points are collinear or coincident"
        )
    H = (w[:, None] * X).T @ Y
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    scale = (S[0] + S[1] + d * S[2]) / np.sum(w[:, None] * X * X)
    if scale <= 0:
        raise DegenerateGeometryError("alignment collapsed to nonpositive scale")
    t = mu_d - scale * (R @ mu_s)
    return RigidTransform3D(scale=scale, rotation=R, translation=t)


def procrustes3d(src: np.ndarray, dst: np.ndarray) -> RigidTransform3D:
    """Closed-form similarity alignment minimizing ``sum ||dst - (sR src + t)||^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (k, 3) arrays")
    return _weighted_procrustes(src, dst, np.ones(len(src)))


def _solve_block(basis, targets, row_weights, lam, mu, var):
    """Weighted ridge solve of one parameter block against 3D targets."""
    q = 1.0 / var
    bw = basis * row_weights[:, None]
    normal = bw.T @ basis + lam * np.diag(q)
    rhs = bw.T @ targets + lam * (q * mu)
    return np.linalg.solve(normal, rhs)


def icp_fit(
    model: BilinearModel,
    cloud: PointCloud,
    iterations: int = 30,
    lambda1: float = 0.5,
    lambda2: float = 0.5,
    w_lm: float = 10.0,
    rel_tol: float = 1e-6,
):
    """Dense fit of the model to a scan; returns (params, transform, trace).

    Each iteration: nearest-neighbor correspondences (model vertex to
    cloud point, outliers beyond 3x the median distance dropped),
    weighted similarity re-solve over dense plus landmark pairs, then
    regularized identity and expression solves in the model frame.  The
    trace holds the weighted mean squared residual per iteration.
    """
    if len(cloud.landmark3d) != model.n_landmarks:
        raise ValueError(
            f"cloud has {len(cloud.landmark3d)} landmarks, model expects "
            f"{model.n_landmarks}"
        )
    if iterations < 1:
        raise ValueError("iterations must be positive")
    params = mean_params(model)
    transform = procrustes3d(
        landmark_positions(model, params), cloud.landmark3d
    )
    tree = cKDTree(cloud.points)
    lm_rows = (3 * model.landmark_indices[:, None] + np.arange(3)).ravel()
    trace = []

    for _ in range(iterations):
        verts = synthesize(model, params).positions
        dist, nn = tree.query(transform.apply(verts))
        cutoff = 3.0 * max(float(np.median(dist)), _TINY)
        keep = dist <= cutoff
        if not np.any(keep):
            raise DegenerateGeometryError("all correspondences rejected")
        dense_dst = cloud.points[nn[keep]]

        src = np.vstack([verts[keep], landmark_positions(model, params)])
        dst = np.vstack([dense_dst, cloud.landmark3d])
        weights = np.concatenate(
            [np.ones(int(keep.sum())), np.full(model.n_landmarks, w_lm)]
        )
        transform = _weighted_procrustes(src, dst, weights)

        # Pull targets into the model frame; the data term then carries a
        # scale^2 weight relative to the priors.
        dense_q = transform.invert_points(dense_dst)
        lm_q = transform.invert_points(cloud.landmark3d)
        vert_rows = (3 * np.flatnonzero(keep)[:, None] + np.arange(3)).ravel()
        s2 = transform.scale ** 2
        row_w = np.concatenate(
            [np.full(len(vert_rows), s2), np.full(len(lm_rows), s2 * w_lm)]
        )
        target_vec = np.concatenate([dense_q.ravel(), lm_q.ravel()])

        basis_id = model.core @ params.beta
        rows = np.concatenate([vert_rows, lm_rows])
        alpha = _solve_block(basis_id[rows], target_vec, row_w,
                             lambda1, model.mu_id, model.var_id)
        params = ShapeParams(alpha, params.beta.copy())
        basis_exp = np.einsum("vij,i->vj", model.core, params.alpha)
        beta = _solve_block(basis_exp[rows], target_vec, row_w,
                            lambda2, model.mu_exp, model.var_exp)
        params = ShapeParams(params.alpha.copy(), beta)

        mapped = transform.apply(synthesize(model, params).positions)
        res_dense = np.sum((mapped[keep] - dense_dst) ** 2, axis=1)
        res_lm = np.sum(
            (mapped[model.landmark_indices] - cloud.landmark3d) ** 2, axis=1
        )
        residual = float(
            (res_dense.sum() + w_lm * res_lm.sum()) / weights.sum()
        )
        trace.append(residual)
        if len(trace) >= 2:
            drop = trace[-2] - trace[-1]
            if drop <= rel_tol * max(trace[-2], _TINY):
                break
    return params, transform, trace


# ---------------------------------------------------------------------------
# Ingestion: ASCII PLY vertices + JSON 3D-landmark sidecar.


def load_ply(path) -> np.ndarray:
    """Vertex positions from an ASCII PLY file."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise FormatError("magic", "not a PLY file")
        fmt = fh.readline().strip()
        if not fmt.startswith("format ascii"):
            raise FormatError("format", f"only ASCII PLY supported, got {fmt!r}")
        n_vertices = None
        vertex_props = []
        current = None
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "element":
                current = tokens[1]
                if current == "vertex":
                    n_vertices = int(tokens[2])
            elif tokens[0] == "property" and current == "vertex":
                vertex_props.append(tokens[-1])
            elif tokens[0] == "end_header":
                break
        else:
            raise FormatError("header", "end_header not found")
        if n_vertices is None:
            raise FormatError("element", "no vertex element declared")
        try:
            cols = [vertex_props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise FormatError("property", "vertex element lacks x/y/z")
        rows = []
        for i in range(n_vertices):
            line = fh.readline()
            if not line:
                raise FormatError("vertex", f"file ends after {i} of {n_vertices}")
            values = line.split()
            rows.append([float(values[c]) for c in cols])
    return np.asarray(rows, dtype=np.float64)


def save_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for x, y, z in points:
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_landmark3d_file(path) -> np.ndarray:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError("landmarks3d", f"invalid JSON: {exc}") from exc
    if "landmarks3d" not in doc:
        raise FormatError("landmarks3d", "missing key")
    pts = np.asarray(doc["landmarks3d"], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise FormatError("landmarks3d", "expected a list of [x, y, z]")
    return pts


def write_landmark3d_file(path, points: np.ndarray) -> None:
    doc = {"landmarks3d": [[float(x), float(y), float(z)]
                           for x, y, z in np.asarray(points)]}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
