"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs once per path to warm up (numba compiles on first call),
then the best of ``--repeat`` timings is reported.  Outputs of the two paths
are checked for equality before timing.
"""

import argparse
import time

import numpy as np

from rgmreg import _kernels


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(rng):
    for n in (128, 512, 1024):
        X, Y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        yield f"knn k=20 N={n}", lambda accel, X=X, Y=Y: _kernels.knn_indices(X, Y, 20, accel)
        yield f"nearest N={n}", lambda accel, X=X, Y=Y: _kernels.nearest(X, Y, accel)
    for n in (32, 64, 128):
        C = rng.uniform(size=(n, n))
        yield f"lap {n}x{n}", lambda accel, C=C: _kernels.lap_min(C, accel)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not _kernels._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  equal")
    for name, fn in cases(np.random.default_rng(args.seed)):
        equal = same(fn(False), fn(True))
        t_np = best_time(lambda: fn(False), args.repeat)
        t_nb = best_time(lambda: fn(True), args.repeat)
        print(f"{name:<18}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  {equal}")


if __name__ == "__main__":
    main()
