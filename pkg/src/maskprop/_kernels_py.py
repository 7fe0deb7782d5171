"""Numpy implementations of the compiled kernels, used when the extension
is unavailable or ``MASKPROP_PURE=1`` is set."""
import numpy as np


def warp_bilinear(src, flow):
    n, h, w = src.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = np.clip(xs + flow[:, 0].astype(np.float64), 0, w - 1)
    sy = np.clip(ys + flow[:, 1].astype(np.float64), 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0
    q = np.arange(n)[:, None, None]
    s = src.astype(np.float64)
    top = (1.0 - wx) * s[q, y0, x0] + wx * s[q, y0, x1]
    bot = (1.0 - wx) * s[q, y1, x0] + wx * s[q, y1, x1]
    return ((1.0 - wy) * top + wy * bot).astype(src.dtype)


def confusion_matrix(pred, gt, num_classes, ignore=255):
    valid = gt != ignore
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= num_classes or p.max() >= num_classes):
        raise ValueError("label out of range")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    ).astype(np.int64)


def window_consistency(gt, pred, f, ignore=255):
    t = gt.shape[0]
    nwin = t - f + 1
    if nwin < 1:
        return np.zeros((0, 2), dtype=np.int64)
    res = np.zeros((nwin, 2), dtype=np.int64)
    for i in range(nwin):
        g = gt[i : i + f]
        p = pred[i : i + f]
        stable = (g == g[0]).all(axis=0) & (g[0] != ignore)
        agree = (p == g[0]).all(axis=0) & stable
        res[i] = stable.sum(), agree.sum()
    return res
