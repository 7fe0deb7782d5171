"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from maskprop import _kernels_py

try:
    from maskprop import _kernels as _ext
except ImportError:
    _ext = None


def cases(rng):
    src = rng.normal(size=(16, 64, 64)).astype(np.float32)
    flow = rng.uniform(-8, 8, size=(16, 2, 64, 64)).astype(np.float32)
    pred = rng.integers(0, 5, size=(256, 256), dtype=np.uint8)
    gt = rng.integers(0, 5, size=(256, 256), dtype=np.uint8)
    gt[:8] = 255
    seq_gt = rng.integers(0, 2, size=(15, 64, 64), dtype=np.uint8)
    seq_pred = rng.integers(0, 2, size=(15, 64, 64), dtype=np.uint8)
    return {
        "warp_bilinear 16x64x64": lambda m: m.warp_bilinear(src, flow),
        "confusion_matrix 256x256": lambda m: m.confusion_matrix(pred, gt, 5, 255),
        "window_consistency 15x64x64 f=8": lambda m: m.window_consistency(seq_gt, seq_pred, 8, 255),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.number, repeat=args.repeat)) / args.number
        if _ext is None:
            print(f"{name:34s} {py * 1e3:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        np.testing.assert_allclose(fn(_ext), fn(_kernels_py), rtol=1e-4, atol=1e-5)
        cy = min(timeit.repeat(lambda: fn(_ext), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:34s} {py * 1e3:10.3f} {cy * 1e3:10.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
