"""Reconstruction quality metrics and aggregation.

Shapes are compared directly in model coordinates (both sides come from
the same model); an optional similarity pre-alignment supports
cross-source comparisons.  Errors are therefore in model units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import BilinearModel, Shape, mean_params, synthesize


@dataclass
class RegionMask:
    """Named vertex subset over which errors are accumulated."""

    name: str
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1 or self.indices.size == 0:
            raise ValueError("mask must contain at least one vertex index")
        if self.indices.min() < 0:
            raise ValueError("negative vertex index in mask")


def whole_mask(n_vertices: int) -> RegionMask:
    return RegionMask("whole", np.arange(n_vertices))


def center_mask(model: BilinearModel, fraction: float = 0.6) -> RegionMask:
    """Vertices within ``fraction`` of the bounding-sphere radius of the
    nose-region centroid (the front-most 5% of the mean shape)."""
    pos = synthesize(model, mean_params(model)).positions
    centroid = pos.mean(axis=0)
    radius = np.max(np.linalg.norm(pos - centroid, axis=1))
    n_front = max(1, int(round(0.05 * len(pos))))
    front = pos[np.argsort(pos[:, 2])[::-1][:n_front]]
    nose = front.mean(axis=0)
    sel = np.flatnonzero(np.linalg.norm(pos - nose, axis=1) <= fraction * radius)
    if sel.size == 0:
        raise ValueError("center mask is empty; increase fraction")
    return RegionMask("center", sel)


def _masked(gt: Shape, rec: Shape, mask: RegionMask | None):
    if gt.positions.shape != rec.positions.shape:
        raise ValueError(
            f"vertex counts differ: {gt.positions.shape} vs {rec.positions.shape}"
        )
    if mask is None:
        return gt.positions, rec.positions
    if mask.indices.max() >= len(gt.positions):
        raise ValueError(f"mask {mask.name!r} exceeds vertex count")
    return gt.positions[mask.indices], rec.positions[mask.indices]


def rmse_z(gt: Shape, rec: Shape, mask: RegionMask | None = None) -> float:
    """Root mean squared difference of z coordinates over masked vertices."""
    a, b = _masked(gt, rec, mask)
    return float(np.sqrt(np.mean((a[:, 2] - b[:, 2]) ** 2)))


def mae(gt: Shape, rec: Shape, mask: RegionMask | None = None,
        align: bool = False) -> float:
    """Mean per-vertex Euclidean distance over masked vertices.

    With ``align`` the reconstruction is similarity-aligned to the
    ground truth first (for cross-source comparisons).
    """
    a, b = _masked(gt, rec, mask)
    if align:
        from .dataprep import procrustes3d

        b = procrustes3d(b, a).apply(b)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def ced(errors, thresholds) -> np.ndarray:
    """Fraction of errors at or below each threshold."""
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no errors given")
    return np.array([np.mean(errors <= t) for t in thresholds])


@dataclass
class ClassTable:
    """Per-class means plus the overall mean and the max pairwise
    relative difference between class means."""

    rows: list  # (label, count, mean) sorted by label
    overall_mean: float
    max_rel_diff: float


def aggregate_by_class(errors, labels) -> ClassTable:
    errors = np.asarray(errors, dtype=np.float64)
    labels = list(labels)
    if len(errors) != len(labels):
        raise ValueError("errors and labels must have the same length")
    if len(errors) == 0:
        raise ValueError("nothing to aggregate")
    rows = []
    for label in sorted(set(labels), key=str):
        sel = np.array([l == label for l in labels])
        rows.append((label, int(sel.sum()), float(errors[sel].mean())))
    means = [m for _, _, m in rows]
    max_rel = 0.0
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            lo = min(means[i], means[j])
            hi = max(means[i], means[j])
            if hi == lo:
                continue
            max_rel = max(max_rel, (hi - lo) / lo) if lo > 0 else float("inf")
    return ClassTable(
        rows=rows,
        overall_mean=float(errors.mean()),
        max_rel_diff=max_rel,
    )


# ---------------------------------------------------------------------------
# CSV emission for external plotting.


def write_per_sample_csv(path, records: list, fieldnames: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec)


def write_class_csv(path, table: ClassTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count", "mean_error"])
        for label, count, mean in table.rows:
            writer.writerow([label, count, repr(mean)])
        writer.writerow(["__overall__", sum(c for _, c, _ in table.rows),
                         repr(table.overall_mean)])


def write_ced_csv(path, thresholds, fractions) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fraction"])
        for t, f in zip(thresholds, fractions):
            writer.writerow([repr(float(t)), repr(float(f))])
