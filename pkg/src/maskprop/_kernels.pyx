# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels: bilinear backward warp, confusion counts,
video-consistency window counts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


def warp_bilinear(const real[:, :, ::1] src, const real[:, :, :, ::1] flow):
    cdef Py_ssize_t n = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef Py_ssize_t q, y, x, x0, y0, x1, y1
    cdef double sx, sy, wx, wy, top, bot
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, h, w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    with nogil:
        for q in range(n):
            for y in range(h):
                for x in range(w):
                    sx = x + flow[q, 0, y, x]
                    sy = y + flow[q, 1, y, x]
                    if sx < 0:
                        sx = 0
                    elif sx > w - 1:
                        sx = w - 1
                    if sy < 0:
                        sy = 0
                    elif sy > h - 1:
                        sy = h - 1
                    x0 = <Py_ssize_t>floor(sx)
                    y0 = <Py_ssize_t>floor(sy)
                    x1 = x0 + 1 if x0 < w - 1 else x0
                    y1 = y0 + 1 if y0 < h - 1 else y0
                    wx = sx - x0
                    wy = sy - y0
                    top = (1.0 - wx) * src[q, y0, x0] + wx * src[q, y0, x1]
                    bot = (1.0 - wx) * src[q, y1, x0] + wx * src[q, y1, x1]
                    out[q, y, x] = <real>((1.0 - wy) * top + wy * bot)
    return out_arr


def confusion_matrix(const cnp.uint8_t[:, ::1] pred, const cnp.uint8_t[:, ::1] gt, int num_classes,
                     int ignore=255):
    cdef Py_ssize_t h = gt.shape[0], w = gt.shape[1], y, x
    cdef int g, p
    counts_arr = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    for y in range(h):
        for x in range(w):
            g = gt[y, x]
            if g == ignore:
                continue
            p = pred[y, x]
            if g >= num_classes or p >= num_classes:
                raise ValueError(f"label out of range at ({y}, {x})")
            counts[g, p] += 1
    return counts_arr


def window_consistency(const cnp.uint8_t[:, :, ::1] gt, const cnp.uint8_t[:, :, ::1] pred, int f,
                       int ignore=255):
    """Per window start i: (#pixels where GT is constant and valid over the
    window, #of those where the prediction is also constant and equals GT).

    One pass over time per pixel, tracking the length of the GT run ending at
    t and of the stretch of that run the prediction matched."""
    cdef Py_ssize_t t = gt.shape[0], h = gt.shape[1], w = gt.shape[2]
    cdef Py_ssize_t nwin = t - f + 1, i, y, x
    cdef int g, prev, run_gt, run_ok
    if nwin < 1:
        return np.zeros((0, 2), dtype=np.int64)
    res_arr = np.zeros((nwin, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] res = res_arr
    for y in range(h):
        for x in range(w):
            prev = -1
            run_gt = 0
            run_ok = 0
            for i in range(t):
                g = gt[i, y, x]
                if g == ignore:
                    run_gt = 0
                    run_ok = 0
                elif g == prev:
                    run_gt += 1
                    run_ok = run_ok + 1 if pred[i, y, x] == g else 0
                else:
                    run_gt = 1
                    run_ok = 1 if pred[i, y, x] == g else 0
                prev = g
                if i >= f - 1 and run_gt >= f:
                    res[i - f + 1, 0] += 1
                    if run_ok >= f:
                        res[i - f + 1, 1] += 1
    return res_arr
