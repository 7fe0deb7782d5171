"""Backend selection for the per-pixel kernels.

The Cython extension is used when it imports; otherwise, or when the
environment variable ``MASKPROP_PURE=1`` is set, the numpy versions are used.
Both expose identical signatures.
"""
import os

import numpy as np

from . import _kernels_py

_ext = None
if os.environ.get("MASKPROP_PURE", "") != "1":
    try:
        from . import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _kernels_py


def warp_bilinear(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp ``src`` (N x H x W) by ``flow`` (N x 2 x H x W, dx then dy),
    clamping sample coordinates to the image border."""
    dtype = np.float64 if src.dtype == np.float64 or flow.dtype == np.float64 else np.float32
    src = np.ascontiguousarray(src, dtype=dtype)
    flow = np.ascontiguousarray(flow, dtype=dtype)
    if src.ndim != 3 or flow.shape != (src.shape[0], 2) + src.shape[1:]:
        raise ValueError(f"shape mismatch: src {src.shape}, flow {flow.shape}")
    return _impl.warp_bilinear(src, flow)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = 255) -> np.ndarray:
    pred = np.ascontiguousarray(pred, dtype=np.uint8)
    gt = np.ascontiguousarray(gt, dtype=np.uint8)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    return _impl.confusion_matrix(pred, gt, num_classes, ignore)


def window_consistency(gt: np.ndarray, pred: np.ndarray, f: int, ignore: int = 255) -> np.ndarray:
    gt = np.ascontiguousarray(gt, dtype=np.uint8)
    pred = np.ascontiguousarray(pred, dtype=np.uint8)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    return _impl.window_consistency(gt, pred, f, ignore)
