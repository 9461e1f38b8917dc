"""Pure-NumPy implementations of the hot kernels.

These mirror the compiled versions in ``_fast.pyx`` operation for
operation (same expressions, same accumulation order), so the two
backends produce bit-identical results and either can serve as the
oracle for the other.
"""

from __future__ import annotations

import numpy as np


def hog_cell_hists(patch: np.ndarray, cell_size: int, nbins: int) -> np.ndarray:
    """Orientation histograms per cell from magnitude-weighted gradient votes.

    Gradients are centered differences with edge replication; unsigned
    orientations in [0, pi) vote linearly into the two nearest bin
    centers (centers at ``(k + 0.5) * pi / nbins``, wrapping).
    """
    patch = np.ascontiguousarray(patch, dtype=np.float64)
    h, w = patch.shape
    ncy, ncx = h // cell_size, w // cell_size

    gx = np.empty_like(patch)
    gx[:, 1:-1] = patch[:, 2:] - patch[:, :-2]
    gx[:, 0] = patch[:, 1] - patch[:, 0]
    gx[:, -1] = patch[:, -1] - patch[:, -2]
    gy = np.empty_like(patch)
    gy[1:-1, :] = patch[2:, :] - patch[:-2, :]
    gy[0, :] = patch[1, :] - patch[0, :]
    gy[-1, :] = patch[-1, :] - patch[-2, :]

    mag = np.sqrt(gx * gx + gy * gy)
    ori = np.arctan2(gy, gx)
    ori = np.where(ori < 0.0, ori + np.pi, ori)
    ori = np.where(ori >= np.pi, ori - np.pi, ori)

    binw = np.pi / nbins
    z = ori / binw - 0.5
    k0 = np.floor(z)
    frac = z - k0
    b0 = (k0.astype(np.int64) + nbins) % nbins
    b1 = (b0 + 1) % nbins

    ys, xs = np.indices((h, w))
    cell_index = (ys // cell_size) * ncx + (xs // cell_size)
    # Interleave the two votes per pixel so accumulation order matches the
    # compiled kernel's per-pixel loop exactly.
    idx = np.stack([cell_index * nbins + b0, cell_index * nbins + b1], axis=-1)
    votes = np.stack([mag * (1.0 - frac), mag * frac], axis=-1)
    hist = np.bincount(idx.ravel(), weights=votes.ravel(),
                       minlength=ncy * ncx * nbins)
    return hist.reshape(ncy, ncx, nbins)


def rasterize(
    xy: np.ndarray,
    depth: np.ndarray,
    faces: np.ndarray,
    shade: np.ndarray,
    height: int,
    width: int,
) -> np.ndarray:
    """Flat-shaded z-buffer triangle rasterization.

    ``xy`` are pixel coordinates (x right, y up; pixel centers at integer
    coordinates, row r holds y == r), ``depth`` is camera depth with
    larger values closer to the viewer.  Background stays 0.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    shade = np.ascontiguousarray(shade, dtype=np.float64)

    img = np.zeros((height, width), dtype=np.float64)
    zbuf = np.full((height, width), -np.inf)

    for k in range(len(faces)):
        i0, i1, i2 = faces[k]
        x0, y0 = xy[i0]
        x1, y1 = xy[i1]
        x2, y2 = xy[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        cmin = max(0, int(np.ceil(min(x0, x1, x2))))
        cmax = min(width - 1, int(np.floor(max(x0, x1, x2))))
        rmin = max(0, int(np.ceil(min(y0, y1, y2))))
        rmax = min(height - 1, int(np.floor(max(y0, y1, y2))))
        if cmin > cmax or rmin > rmax:
            continue
        px = np.arange(cmin, cmax + 1, dtype=np.float64)[None, :]
        py = np.arange(rmin, rmax + 1, dtype=np.float64)[:, None]
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if area > 0.0:
            inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        else:
            inside = (w0 <= 0.0) & (w1 <= 0.0) & (w2 <= 0.0)
        if not inside.any():
            continue
        z = (w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]) / area
        win = zbuf[rmin : rmax + 1, cmin : cmax + 1]
        hit = inside & (z > win)
        win[hit] = z[hit]
        img[rmin : rmax + 1, cmin : cmax + 1][hit] = shade[k]
    return img
