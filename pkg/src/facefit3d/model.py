"""Bilinear identity/expression shape model.

A face shape is produced by contracting a rank-3 core tensor with an
identity parameter vector and an expression parameter vector.  The core
is stored as a ``(3n, d_id, d_exp)`` array whose first mode is
vertex-major (``x0, y0, z0, x1, ...``), so contracting the expression
mode first yields the identity basis matrix in one step.

Model containers are saved as a self-describing binary file (magic
``BFM3``) with a JSON sidecar carrying the same metadata for human
inspection.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

MODEL_MAGIC = b"BFM3"
MODEL_VERSION = 1


def _as_readonly(a: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class BilinearModel:
    """Immutable bilinear shape model; safe for shared concurrent reads.

    Attributes:
        core: ``(3 * n_vertices, d_id, d_exp)`` core tensor, model units.
        mu_id / mu_exp: mean identity / expression parameters.
        var_id / var_exp: per-parameter variances (strictly positive);
            their reciprocals weight the fitting regularizers.
        landmark_indices: vertex indices of the tracked landmarks.
        faces: ``(n_faces, 3)`` triangle list over vertex indices.
    """

    core: np.ndarray
    mu_id: np.ndarray
    mu_exp: np.ndarray
    var_id: np.ndarray
    var_exp: np.ndarray
    landmark_indices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "core", _as_readonly(self.core, np.float64))
        for name in ("mu_id", "mu_exp", "var_id", "var_exp"):
            object.__setattr__(self, name, _as_readonly(getattr(self, name), np.float64))
        object.__setattr__(
            self, "landmark_indices", _as_readonly(self.landmark_indices, np.int64)
        )
        object.__setattr__(self, "faces", _as_readonly(self.faces, np.int64))
        self._validate()

    def _validate(self):
        if self.core.ndim != 3:
            raise ValueError(f"core must be a rank-3 tensor, got ndim={self.core.ndim}")
        rows = self.core.shape[0]
        if rows % 3 != 0 or rows == 0:
            raise ValueError(f"core first dimension must be 3*n_vertices, got {rows}")
        if self.mu_id.shape != (self.d_id,):
            raise ValueError("mu_id length does not match core identity mode")
        if self.mu_exp.shape != (self.d_exp,):
            raise ValueError("mu_exp length does not match core expression mode")
        if self.var_id.shape != (self.d_id,) or self.var_exp.shape != (self.d_exp,):
            raise ValueError("variance vector length does not match core modes")
        if not (np.all(self.var_id > 0) and np.all(self.var_exp > 0)):
            raise ValueError("var_id and var_exp must be elementwise positive")
        if not np.all(np.isfinite(self.core)):
            raise ValueError("core contains non-finite entries")
        lm = self.landmark_indices
        if lm.ndim != 1 or lm.size == 0:
            raise ValueError("landmark_indices must be a non-empty 1-D index list")
        if lm.min() < 0 or lm.max() >= self.n_vertices:
            raise ValueError("landmark index out of vertex range")
        if len(np.unique(lm)) != len(lm):
            raise ValueError("landmark_indices contains duplicates")
        f = self.faces
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be an (n_faces, 3) triangle list")
        if f.size:
            if f.min() < 0 or f.max() >= self.n_vertices:
                raise ValueError("face vertex index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("faces must reference three distinct vertices")

    @property
    def n_vertices(self) -> int:
        return self.core.shape[0] // 3

    @property
    def d_id(self) -> int:
        return self.core.shape[1]

    @property
    def d_exp(self) -> int:
        return self.core.shape[2]

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_indices)

    def landmark_core(self) -> np.ndarray:
        """Slice of the core covering landmark vertices, shape (3L, d_id, d_exp)."""
        rows = (3 * self.landmark_indices[:, None] + np.arange(3)).ravel()
        return self.core[rows]

    def param_scale(self) -> np.ndarray:
        """Per-parameter standard deviations of [alpha; beta], used for whitening."""
        return np.sqrt(np.concatenate([self.var_id, self.var_exp]))

    def fingerprint(self) -> bytes:
        """SHA-256 over dimensions and all array payloads (order-fixed)."""
        h = hashlib.sha256()
        h.update(
            struct.pack(
                "<5I", self.n_vertices, self.d_id, self.d_exp,
                self.n_landmarks, len(self.faces),
            )
        )
        for a in (self.core, self.mu_id, self.mu_exp, self.var_id, self.var_exp):
            h.update(a.tobytes())
        h.update(self.landmark_indices.astype(np.float64).tobytes())
        h.update(self.faces.astype(np.float64).tobytes())
        return h.digest()


@dataclass
class ShapeParams:
    """Identity and expression coefficients; the regression target is their stack."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.ndim != 1 or self.beta.ndim != 1:
            raise ValueError("alpha and beta must be 1-D vectors")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ValueError("parameters must be finite")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @classmethod
    def from_stacked(cls, g: np.ndarray, d_id: int, d_exp: int) -> "ShapeParams":
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (d_id + d_exp,):
            raise ValueError(f"expected stacked length {d_id + d_exp}, got {g.shape}")
        return cls(g[:d_id].copy(), g[d_id:].copy())

    def copy(self) -> "ShapeParams":
        return ShapeParams(self.alpha.copy(), self.beta.copy())


@dataclass
class Shape:
    """Synthesized vertex positions, ``(n_vertices, 3)`` in model units."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be an (n, 3) array")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")


def mean_params(model: BilinearModel) -> ShapeParams:
    return ShapeParams(model.mu_id.copy(), model.mu_exp.copy())


def _check_params(model: BilinearModel, params: ShapeParams):
    if params.alpha.shape != (model.d_id,):
        raise ValueError(
            f"alpha has length {params.alpha.shape[0]}, model expects {model.d_id}"
        )
    if params.beta.shape != (model.d_exp,):
        raise ValueError(
            f"beta has length {params.beta.shape[0]}, model expects {model.d_exp}"
        )


def synthesize(model: BilinearModel, params: ShapeParams) -> Shape:
    """Contract the core with expression then identity coefficients.

    Linear in ``alpha`` for fixed ``beta`` and vice versa.
    """
    _check_params(model, params)
    flat = (model.core @ params.beta) @ params.alpha
    return Shape(flat.reshape(-1, 3))


def vertex_position(model: BilinearModel, params: ShapeParams, i: int) -> np.ndarray:
    """Position of a single vertex without synthesizing the full shape."""
    _check_params(model, params)
    if not 0 <= i < model.n_vertices:
        raise ValueError(f"vertex index {i} out of range [0, {model.n_vertices})")
    block = model.core[3 * i : 3 * i + 3]
    return (block @ params.beta) @ params.alpha


def landmark_positions(model: BilinearModel, params: ShapeParams) -> np.ndarray:
    """Positions of the landmark vertices, ``(L, 3)``, in landmark-index order."""
    _check_params(model, params)
    flat = (model.landmark_core() @ params.beta) @ params.alpha
    return flat.reshape(-1, 3)


def shape_basis_id(model: BilinearModel, beta: np.ndarray) -> np.ndarray:
    """Matrix ``B`` with ``B @ alpha == synthesize(...).positions.ravel()``."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (model.d_exp,):
        raise ValueError(f"beta has length {beta.shape}, model expects {model.d_exp}")
    return model.core @ beta


def shape_basis_exp(model: BilinearModel, alpha: np.ndarray) -> np.ndarray:
    """Matrix ``B`` with ``B @ beta == synthesize(...).positions.ravel()``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (model.d_id,):
        raise ValueError(f"alpha has length {alpha.shape}, model expects {model.d_id}")
    return np.einsum("vij,i->vj", model.core, alpha)


# ---------------------------------------------------------------------------
# Serialization: "BFM3" container + JSON sidecar.
#
# Layout: magic, version u32, then n_vertices, d_id, d_exp, n_landmarks,
# n_faces as little-endian u32, then the arrays as little-endian f64 in
# order: core, mu_id, mu_exp, var_id, var_exp, landmark_indices, faces.

_HEADER = struct.Struct("<4sI5I")


def save_model(model: BilinearModel, path) -> None:
    path = Path(path)
    n, di, de = model.n_vertices, model.d_id, model.d_exp
    arrays = [
        model.core.ravel(),
        model.mu_id,
        model.mu_exp,
        model.var_id,
        model.var_exp,
        model.landmark_indices.astype(np.float64),
        model.faces.astype(np.float64).ravel(),
    ]
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MODEL_MAGIC, MODEL_VERSION, n, di, de,
                model.n_landmarks, len(model.faces),
            )
        )
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    sidecar = {
        "format": MODEL_MAGIC.decode(),
        "version": MODEL_VERSION,
        "n_vertices": n,
        "d_id": di,
        "d_exp": de,
        "n_landmarks": model.n_landmarks,
        "n_faces": len(model.faces),
        "fingerprint": model.fingerprint().hex(),
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_array(fh, name: str, count: int) -> np.ndarray:
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(name, f"expected {8 * count} bytes, file truncated at {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def load_model(path) -> BilinearModel:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FormatError("header", "file shorter than header")
        magic, version, n, di, de, nl, nf = _HEADER.unpack(head)
        if magic != MODEL_MAGIC:
            raise FormatError("magic", f"expected {MODEL_MAGIC!r}, found {magic!r}")
        if version != MODEL_VERSION:
            raise VersionError(version, MODEL_VERSION)
        for field, value in (("n_vertices", n), ("d_id", di), ("d_exp", de),
                             ("n_landmarks", nl)):
            if value == 0:
                raise FormatError(field, "must be positive")
        core = _read_array(fh, "core", 3 * n * di * de).reshape(3 * n, di, de)
        mu_id = _read_array(fh, "mu_id", di)
        mu_exp = _read_array(fh, "mu_exp", de)
        var_id = _read_array(fh, "var_id", di)
        var_exp = _read_array(fh, "var_exp", de)
        lm = _read_array(fh, "landmark_indices", nl)
        faces = _read_array(fh, "faces", 3 * nf).reshape(nf, 3)
        if fh.read(1):
            raise FormatError("trailer", "unexpected bytes after declared arrays")
    if not np.all(lm == np.round(lm)):
        raise FormatError("landmark_indices", "non-integral index value")
    if faces.size and not np.all(faces == np.round(faces)):
        raise FormatError("faces", "non-integral vertex index")
    try:
        return BilinearModel(
            core=core,
            mu_id=mu_id,
            mu_exp=mu_exp,
            var_id=var_id,
            var_exp=var_exp,
            landmark_indices=lm.astype(np.int64),
            faces=faces.astype(np.int64),
        )
    except ValueError as exc:
        raise FormatError("model", str(exc)) from exc


def save_obj(path, shape: Shape, faces: np.ndarray) -> None:
    """Write a triangle mesh as Wavefront OBJ (1-based face indices)."""
    faces = np.asarray(faces)
    with open(path, "w") as fh:
        for x, y, z in shape.positions:
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_obj_vertices(path) -> np.ndarray:
    """Read vertex positions back from an OBJ file (used by round-trip checks)."""
    verts = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(t) for t in line.split()[1:4]])
    return np.asarray(verts, dtype=np.float64)
