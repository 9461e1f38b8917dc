"""Image handling and the joint appearance + displacement feature.

The feature for one sample concatenates per-landmark HOG descriptors
(computed on square patches centered at the current landmark
projections) with the stacked 2D displacements between detected
landmarks and those projections.

Images are stored y-up internally (row 0 is the image bottom) so that
all geometry shares one right-handed frame; readers and writers flip
rows once at the file boundary.  Color input collapses to grayscale with
the 0.299/0.587/0.114 luma weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import camera, kernels
from .landmarks import LandmarkSet
from .model import BilinearModel, ShapeParams, landmark_positions


@dataclass
class Image:
    """Grayscale intensities in [0, 1]; ``pixels[r, c]`` has y == r (y up)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ValueError("pixels must be a non-empty 2-D array")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixel values must be finite")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def load_image(path) -> Image:
    """Read an 8-bit grayscale or RGB PNG/PGM file."""
    with PILImage.open(path) as img:
        if img.mode in ("L", "P", "1"):
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        else:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
            arr = rgb @ np.array([0.299, 0.587, 0.114])
    return Image(arr[::-1])


def save_pgm(image: Image, path) -> None:
    """Write binary 8-bit PGM (P5); deterministic bytes for identical input."""
    arr = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    arr = arr[::-1]  # back to top-left origin
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


@dataclass
class HogConfig:
    """HOG layout plus the feature-mode switches frozen into a cascade.

    ``normalize_ld`` divides landmark displacements by the pose scale so
    the feature is resolution-independent; ``scale_patch`` samples the
    patch at ``patch_size * scale`` pixels before resizing back down.
    Both default to the values used throughout the tests; disabling
    ``normalize_ld`` gives raw pixel displacements.
    """

    patch_size: int = 64
    cell_size: int = 8
    block_cells: int = 2
    block_stride_cells: int = 1
    orientation_bins: int = 9
    clip: float = 0.2
    epsilon: float = 1e-6
    normalize_ld: bool = True
    scale_patch: bool = False

    def __post_init__(self):
        if self.patch_size % self.cell_size != 0:
            raise ValueError("patch_size must be divisible by cell_size")
        cells = self.patch_size // self.cell_size
        if self.block_cells > cells:
            raise ValueError("block_cells exceeds cells per side")
        if self.block_stride_cells < 1 or self.orientation_bins < 2:
            raise ValueError("invalid stride or bin count")

    @property
    def cells_per_side(self) -> int:
        return self.patch_size // self.cell_size

    @property
    def blocks_per_side(self) -> int:
        return (self.cells_per_side - self.block_cells) // self.block_stride_cells + 1

    @property
    def descriptor_size(self) -> int:
        return (
            self.blocks_per_side ** 2
            * self.block_cells ** 2
            * self.orientation_bins
        )

    def feature_length(self, n_landmarks: int) -> int:
        return n_landmarks * self.descriptor_size + 2 * n_landmarks


@dataclass
class FeatureVector:
    """Concatenated per-landmark HOG blocks and landmark displacements."""

    hog: np.ndarray
    ld: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.hog, self.ld])


def extract_patch(image: Image, center, size: int) -> np.ndarray:
    """Axis-aligned ``size x size`` crop around the rounded center.

    Pixels outside the image are filled by edge replication, so any
    finite center is valid.
    """
    cx, cy = float(center[0]), float(center[1])
    if not (np.isfinite(cx) and np.isfinite(cy)):
        raise ValueError("patch center must be finite")
    half = size // 2
    c0 = int(np.rint(cx)) - half
    r0 = int(np.rint(cy)) - half
    rows = np.clip(np.arange(r0, r0 + size), 0, image.height - 1)
    cols = np.clip(np.arange(c0, c0 + size), 0, image.width - 1)
    return image.pixels[np.ix_(rows, cols)]


def _resize_bilinear(patch: np.ndarray, size: int) -> np.ndarray:
    src = patch.shape[0]
    if src == size:
        return patch
    coords = np.linspace(0.0, src - 1.0, size)
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, src - 2)
    f = coords - i0
    rows = patch[i0] * (1.0 - f)[:, None] + patch[i0 + 1] * f[:, None]
    return rows[:, i0] * (1.0 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def hog_descriptor(patch: np.ndarray, config: HogConfig) -> np.ndarray:
    """Block-normalized orientation histograms of one patch.

    Cell histograms come from the active kernel backend; blocks of
    ``block_cells`` x ``block_cells`` cells are L2-normalized, clipped,
    and renormalized, then flattened block-major.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (config.patch_size, config.patch_size):
        raise ValueError(
            f"patch shape {patch.shape} does not match configured size "
            f"{config.patch_size}"
        )
    cells = kernels.hog_cell_hists(patch, config.cell_size, config.orientation_bins)
    bc, stride = config.block_cells, config.block_stride_cells
    nb = config.blocks_per_side
    eps2 = config.epsilon ** 2
    windows = np.lib.stride_tricks.sliding_window_view(cells, (bc, bc), axis=(0, 1))
    blocks = windows[::stride, ::stride].transpose(0, 1, 3, 4, 2)
    v = blocks.reshape(nb, nb, bc * bc * config.orientation_bins).copy()
    v /= np.sqrt(np.sum(v * v, axis=-1) + eps2)[..., None]
    np.minimum(v, config.clip, out=v)
    v /= np.sqrt(np.sum(v * v, axis=-1) + eps2)[..., None]
    return v.ravel()


def landmark_displacement(
    landmarks: LandmarkSet, projections: np.ndarray, scale: float = 1.0
) -> np.ndarray:
    """Stacked per-landmark 2D offsets from projections to detections.

    Offsets are divided by ``scale`` (pass the pose scale to make the
    feature invariant to image resolution, or 1.0 for raw pixels).
    """
    projections = np.asarray(projections, dtype=np.float64)
    if projections.shape != landmarks.points.shape:
        raise ValueError(
            f"projection shape {projections.shape} does not match "
            f"{landmarks.points.shape}"
        )
    return ((landmarks.points - projections) / scale).ravel()


def joint_feature(
    image: Image,
    model: BilinearModel,
    params: ShapeParams,
    pose: camera.CameraPose,
    landmarks: LandmarkSet,
    config: HogConfig,
) -> FeatureVector:
    """Joint appearance + displacement feature at the current estimate."""
    proj = camera.project(pose, landmark_positions(model, params))
    hogs = np.empty(model.n_landmarks * config.descriptor_size)
    sample_size = config.patch_size
    if config.scale_patch:
        sample_size = max(
            config.cell_size, int(np.rint(config.patch_size * pose.scale))
        )
    for i in range(model.n_landmarks):
        patch = extract_patch(image, proj[i], sample_size)
        if sample_size != config.patch_size:
            patch = _resize_bilinear(patch, config.patch_size)
        hogs[i * config.descriptor_size : (i + 1) * config.descriptor_size] = (
            hog_descriptor(patch, config)
        )
    ld_scale = pose.scale if config.normalize_ld else 1.0
    ld = landmark_displacement(landmarks, proj, ld_scale)
    return FeatureVector(hog=hogs, ld=ld)
