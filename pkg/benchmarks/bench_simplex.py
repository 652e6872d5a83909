"""Compare the compiled and pure-Python network simplex kernels.

Usage::

    python benchmarks/bench_simplex.py [--sizes 20 50 100] [--repeats 3]

Both kernels are run on the same random instances. The script checks that
they return the same objective and prints the median wall time of each.
"""

import argparse
import time

import numpy as np
from scipy.spatial.distance import cdist

from srot import _simplex_py

try:
    from srot import _simplex
except ImportError:
    _simplex = None


def instance(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = rng.normal(size=(n, 2)) + 1.0
    a = rng.uniform(0.5, 1.5, n)
    b = rng.uniform(0.5, 1.5, n)
    C = cdist(x, y)
    return a / a.sum(), b / b.sum(), C / C.max()


def timed(kernel, a, b, C, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = kernel.network_simplex(a, b, C, 10_000_000)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[20, 50, 100, 200])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)
    if _simplex is None:
        print("compiled kernel not built; only the Python kernel is timed")
    print(f"{'n':>6} {'python [s]':>12} {'cython [s]':>12} {'speedup':>9} {'|dobj|':>10}")
    for n in args.sizes:
        a, b, C = instance(n, seed=n)
        t_py, out_py = timed(_simplex_py, a, b, C, args.repeats)
        if _simplex is None:
            print(f"{n:>6} {t_py:>12.4f} {'-':>12} {'-':>9} {'-':>10}")
            continue
        t_cy, out_cy = timed(_simplex, a, b, C, args.repeats)
        diff = abs(np.sum(out_py[0] * C) - np.sum(out_cy[0] * C))
        print(f"{n:>6} {t_py:>12.4f} {t_cy:>12.4f} {t_py / t_cy:>9.1f} {diff:>10.1e}")


if __name__ == "__main__":
    main()
