"""Compare the numba and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--M 200000] [--repeat 5]

Times ``counter_normals`` and one ``tube_step`` (with the bridge test) per
backend, reports the best of ``--repeat`` runs and checks that both backends
agree on the result.
"""

import argparse
import time

import numpy as np

from stochkam import kernels
from stochkam._jit import HAVE_NUMBA


def best_time(fn, repeat):
    out = None
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_normals(M, dim, repeat):
    keys = kernels.stream_keys(0, np.arange(M))
    rows = {}
    for backend in ("numba", "numpy"):
        kernels.counter_normals(keys[:10], 0, dim, backend=backend)  # compile / warm up
        rows[backend] = best_time(lambda: kernels.counter_normals(keys, 3, dim, backend=backend), repeat)
    diff = np.max(np.abs(rows["numba"][1] - rows["numpy"][1]))
    return {b: t for b, (t, _) in rows.items()}, diff


def bench_tube_step(M, repeat):
    d = 2
    keys = kernels.stream_keys(1, np.arange(M))
    X0 = np.random.default_rng(0).normal(scale=0.05, size=(M, d))
    drift = np.column_stack([X0[:, 1], -X0[:, 0]])
    S = np.eye(d)[None]
    zero = np.zeros(d)
    lo, hi = np.full(d, -np.inf), np.full(d, np.inf)
    rows = {}
    for backend in ("numba", "numpy"):
        def step():
            X = X0.copy()
            return kernels.tube_step(X, drift, S, keys, 7, 1e-3, 1.0, zero, zero, 0.15, lo, hi,
                                     bridge=True, backend=backend)

        kernels.tube_step(X0[:10].copy(), drift[:10], S, keys[:10], 0, 1e-3, 1.0, zero, zero, 0.15, lo, hi,
                          backend=backend)
        rows[backend] = best_time(step, repeat)
    mism = int(np.sum(rows["numba"][1] != rows["numpy"][1]))
    return {b: t for b, (t, _) in rows.items()}, mism


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--M", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"M = {args.M}, best of {args.repeat}")
    print(f"{'kernel':<22}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    t, diff = bench_normals(args.M, 2, args.repeat)
    print(f"{'counter_normals d=2':<22}{1e3 * t['numba']:>12.2f}{1e3 * t['numpy']:>12.2f}"
          f"{t['numpy'] / t['numba']:>10.2f}   max |diff| {diff:.1e}")
    t, mism = bench_tube_step(args.M, args.repeat)
    print(f"{'tube_step d=2 bridge':<22}{1e3 * t['numba']:>12.2f}{1e3 * t['numpy']:>12.2f}"
          f"{t['numpy'] / t['numba']:>10.2f}   verdict mismatches {mism}")


if __name__ == "__main__":
    main()
