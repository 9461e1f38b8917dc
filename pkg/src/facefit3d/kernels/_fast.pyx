# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: HOG cell histograms and triangle rasterization.

Kept expression-for-expression identical to ``numpy_backend`` so both
backends return the same bits (modulo libm rounding in atan2).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, ceil, floor, sqrt, M_PI

cnp.import_array()


def hog_cell_hists(patch, int cell_size, int nbins):
    patch = np.ascontiguousarray(patch, dtype=np.float64)
    cdef double[:, ::1] p = patch
    cdef int h = p.shape[0]
    cdef int w = p.shape[1]
    cdef int ncy = h // cell_size
    cdef int ncx = w // cell_size
    out = np.zeros(ncy * ncx * nbins, dtype=np.float64)
    cdef double[::1] hist = out
    cdef double binw = M_PI / nbins
    cdef int x, y, xm, xp, ym, yp, b0, b1, ci
    cdef long k0
    cdef double gx, gy, mag, ori, z, frac
    for y in range(h):
        for x in range(w):
            xp = x + 1 if x + 1 < w else w - 1
            xm = x - 1 if x >= 1 else 0
            yp = y + 1 if y + 1 < h else h - 1
            ym = y - 1 if y >= 1 else 0
            gx = p[y, xp] - p[y, xm]
            gy = p[yp, x] - p[ym, x]
            mag = sqrt(gx * gx + gy * gy)
            ori = atan2(gy, gx)
            if ori < 0.0:
                ori += M_PI
            if ori >= M_PI:
                ori -= M_PI
            z = ori / binw - 0.5
            frac = z - floor(z)
            k0 = <long> floor(z)
            b0 = <int> ((k0 + nbins) % nbins)
            b1 = (b0 + 1) % nbins
            ci = (y // cell_size) * ncx + (x // cell_size)
            hist[ci * nbins + b0] += mag * (1.0 - frac)
            hist[ci * nbins + b1] += mag * frac
    return out.reshape(ncy, ncx, nbins)


def rasterize(xy, depth, faces, shade, int height, int width):
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    shade = np.ascontiguousarray(shade, dtype=np.float64)
    cdef double[:, ::1] pts = xy
    cdef double[::1] dep = depth
    cdef long[:, ::1] tri = faces
    cdef double[::1] sh = shade
    img_arr = np.zeros((height, width), dtype=np.float64)
    zbuf_arr = np.full((height, width), -np.inf)
    cdef double[:, ::1] img = img_arr
    cdef double[:, ::1] zbuf = zbuf_arr
    cdef Py_ssize_t k, nf = tri.shape[0]
    cdef long i0, i1, i2
    cdef int r, c, rmin, rmax, cmin, cmax
    cdef double x0, y0, x1, y1, x2, y2, z0, z1, z2
    cdef double area, w0, w1, w2, z, px, py, s
    cdef bint inside
    for k in range(nf):
        i0 = tri[k, 0]
        i1 = tri[k, 1]
        i2 = tri[k, 2]
        x0 = pts[i0, 0]; y0 = pts[i0, 1]
        x1 = pts[i1, 0]; y1 = pts[i1, 1]
        x2 = pts[i2, 0]; y2 = pts[i2, 1]
        z0 = dep[i0]; z1 = dep[i1]; z2 = dep[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        cmin = <int> ceil(min(x0, min(x1, x2)))
        cmax = <int> floor(max(x0, max(x1, x2)))
        rmin = <int> ceil(min(y0, min(y1, y2)))
        rmax = <int> floor(max(y0, max(y1, y2)))
        if cmin < 0:
            cmin = 0
        if rmin < 0:
            rmin = 0
        if cmax > width - 1:
            cmax = width - 1
        if rmax > height - 1:
            rmax = height - 1
        if cmin > cmax or rmin > rmax:
            continue
        s = sh[k]
        for r in range(rmin, rmax + 1):
            py = r
            for c in range(cmin, cmax + 1):
                px = c
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if area > 0.0:
                    inside = w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0
                else:
                    inside = w0 <= 0.0 and w1 <= 0.0 and w2 <= 0.0
                if not inside:
                    continue
                z = (w0 * z0 + w1 * z1 + w2 * z2) / area
                if z > zbuf[r, c]:
                    zbuf[r, c] = z
                    img[r, c] = s
    return img_arr
