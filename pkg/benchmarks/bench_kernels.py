"""Time the numba kernels against their numpy counterparts.

Usage: python3 benchmarks/bench_kernels.py [--n 64] [--repeat 5]
"""
import argparse
import time

import numpy as np

from microhom import _kernels
from microhom.geometry import build_cell, edge_weights


def timeit(fn, args, repeat):
    fn(*args)  # warm-up (jit compile)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def cases(n, rng):
    cell = build_cell((((0.25,) * 3, (0.75,) * 3),), n)
    st, so = edge_weights(cell.chi1)
    phi = rng.standard_normal((n, n, n))
    u = rng.standard_normal((n, n, n, 3))
    pts = rng.standard_normal((n**3 // 4, 3)) * 0.5
    shifts = rng.standard_normal((64, 3)) * 0.1
    return {
        "edge_apply": (phi, *st, float(n * n)),
        "edge_sums": (u, *st, *so),
        "shift_margins": (pts, shifts),
        "radial_project": (pts, np.array([0.05, -0.02, 0.1]), 0.9, 1e-3),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    rng = np.random.default_rng(0)
    if not _kernels.HAVE_NUMBA:
        print("numba not available; only the numpy path exists")
    print(f"{'kernel':16s} {'numpy [s]':>12s} {'numba [s]':>12s} {'speed-up':>9s} {'rel diff':>10s}")
    for name, args in cases(a.n, rng).items():
        tn = timeit(_kernels.numpy_impl[name], args, a.repeat)
        tb = timeit(_kernels.numba_impl[name], args, a.repeat)
        rn = _kernels.numpy_impl[name](*args)
        rb = _kernels.numba_impl[name](*args)
        rn = rn[0] if isinstance(rn, tuple) else rn
        rb = rb[0] if isinstance(rb, tuple) else rb
        rn, rb = np.asarray(rn, dtype=float), np.asarray(rb, dtype=float)
        diff = float(np.max(np.abs(rn - rb)) / max(1.0, np.max(np.abs(rn))))
        print(f"{name:16s} {tn:12.4e} {tb:12.4e} {tn / tb:9.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
