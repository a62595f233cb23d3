"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from fsaf.kernels import available_backends


def cases(rng):
    x = rng.normal(size=(8, 32, 32, 32)).astype(np.float32)
    cols = rng.normal(size=(32 * 9, 8 * 16 * 16)).astype(np.float32)
    tl = rng.uniform(0, 100, (400, 2))
    boxes = np.concatenate([tl, tl + rng.uniform(4, 40, (400, 2))], 1)
    classes = rng.integers(0, 3, 400)
    return {
        "im2col 3x3 s1 (8x32x32x32)": lambda m: m.im2col(x, 3, 3, 1, 1),
        "im2col 3x3 s2 (8x32x32x32)": lambda m: m.im2col(x, 3, 3, 2, 1),
        "col2im 3x3 s2 (8x32x32x32)": lambda m: m.col2im(cols, x.shape, 3, 3, 2, 1),
        "box_iou 400x400": lambda m: m.box_iou_matrix(boxes, boxes),
        "nms_sorted 400 boxes": lambda m: m.nms_sorted(boxes, classes, 0.5),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = available_backends()
    names = sorted(backends, reverse=True)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    with threadpool_limits(1):
        for label, fn in cases(rng).items():
            ms = {}
            for n in names:
                t = timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat)
                ms[n] = 1000 * min(t)
            speed = ms["python"] / ms["cython"] if "cython" in ms else float("nan")
            print(f"{label:<30}" + "".join(f"{ms[n]:14.3f}" for n in names) + f"{speed:10.1f}x")


if __name__ == "__main__":
    main()
