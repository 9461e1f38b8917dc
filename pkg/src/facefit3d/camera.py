"""Scaled-orthographic camera: projection and the linear pose solver.

Pose maps model space to pixels as ``p = a * R[:2] @ v + t`` with a single
isotropic scale.  All camera math lives in a right-handed frame with y up;
loaders flip image-space y once at ingestion (see :mod:`facefit3d.features`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError

_ORTHO_TOL = 1e-9
_PLANAR_REL_TOL = 1e-9


@dataclass
class CameraPose:
    """Scale (pixels per model unit), 3x3 rotation, 2-vector pixel translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.scale = float(self.scale)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if self.translation.shape != (2,):
            raise ValueError("translation must be a 2-vector")
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")


def rotation_from_angles(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Compose R = Rz(roll) @ Rx(pitch) @ Ry(yaw), angles in radians.

    Yaw turns the head left/right (about y), pitch nods (about x), roll
    tilts in-plane (about z).
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def project(pose: CameraPose, points: np.ndarray) -> np.ndarray:
    """Project ``(m, 3)`` model-space points to ``(m, 2)`` pixel coordinates."""
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    out = pose.scale * (pts @ pose.rotation[:2].T) + pose.translation
    return out[0] if single else out


def camera_depth(pose: CameraPose, points: np.ndarray) -> np.ndarray:
    """Signed camera-space depth; larger values are closer to the viewer."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return pts @ pose.rotation[2]


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Orthogonal Procrustes projection of M onto SO(3).

    With ``M = U S V^T`` returns ``U diag(1, 1, det(UV^T)) V^T``, the
    closest rotation in Frobenius norm.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    return (U * np.array([1.0, 1.0, d])) @ Vt


def solve_pose(points2d: np.ndarray, points3d: np.ndarray) -> CameraPose:
    """Least-squares scaled-orthographic pose from 2D-3D correspondences.

    Centers both point sets, solves the unconstrained 2x3 linear map,
    recovers the scale from the row norms, projects onto the nearest
    rotation (third row from the cross product), and recovers the
    translation from the centroids.

    For planar 3D configurations the depth direction is ambiguous up to a
    two-fold flip; of the two solutions the one facing the camera
    (``R[2, 2] >= 0``) is preferred.
    """
    p2 = np.asarray(points2d, dtype=np.float64)
    p3 = np.asarray(points3d, dtype=np.float64)
    if p2.ndim != 2 or p2.shape[1] != 2 or p3.ndim != 2 or p3.shape[1] != 3:
        raise ValueError("expected (m, 2) and (m, 3) arrays")
    if len(p2) != len(p3):
        raise ValueError(f"point counts differ: {len(p2)} vs {len(p3)}")
    m = len(p2)
    if m < 4:
        raise DegenerateGeometryError(f"need at least 4 correspondences, got {m}")

    c2 = p2.mean(axis=0)
    c3 = p3.mean(axis=0)
    q2 = p2 - c2
    q3 = p3 - c3

    svals = np.linalg.svd(q3, compute_uv=False)
    if svals[1] <= _PLANAR_REL_TOL * max(svals[0], 1.0):
        raise DegenerateGeometryError("3D points are collinear or coincident")
    planar = svals[2] <= _PLANAR_REL_TOL * svals[0]

    sol, *_ = np.linalg.lstsq(q3, q2, rcond=None)
    M = sol.T  # 2x3 affine map
    n1 = np.linalg.norm(M[0])
    n2 = np.linalg.norm(M[1])
    if n1 <= 0 or n2 <= 0:
        raise DegenerateGeometryError("projected points carry no spatial extent")
    scale = 0.5 * (n1 + n2)

    r1 = M[0] / n1
    r2 = M[1] / n2
    R = nearest_rotation(np.vstack([r1, r2, np.cross(r1, r2)]))

    if planar and R[2, 2] < 0:
        # The reflection through the point plane composed with a camera
        # z-flip reproduces the same projections; take it when it faces
        # the camera.
        normal = np.linalg.svd(q3)[2][2]
        house = np.eye(3) - 2.0 * np.outer(normal, normal)
        flipped = np.diag([1.0, 1.0, -1.0]) @ R @ house
        if flipped[2, 2] >= 0:
            R = flipped

    t = c2 - scale * (R[:2] @ c3)
    return CameraPose(scale=scale, rotation=R, translation=t)
