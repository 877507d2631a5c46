"""Compare the compiled and pure-Python Jacobi eigensolvers.

    python benchmarks/bench_kernels.py --sizes 8 16 32 --repeats 5
"""
import argparse
import time

import numpy as np

from i2iunlearn.numerics import _jacobi_py

try:
    from i2iunlearn.numerics import _jacobi
except ImportError:
    _jacobi = None


def best_time(fn, a, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(a, 1e-12, 100)
        best = min(best, time.perf_counter() - start)
    return best


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32, 64])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    if _jacobi is None:
        print("compiled extension not built; timing the Python fallback only")
    print(f"{'n':>4} {'python_s':>10} {'cython_s':>10} {'speedup':>8} {'max_eig_diff':>13}")
    for n in args.sizes:
        b = rng.normal(size=(n, n))
        a = b @ b.T
        t_py = best_time(_jacobi_py.jacobi_eigh, a, args.repeats)
        if _jacobi is None:
            print(f"{n:>4} {t_py:>10.4f} {'-':>10} {'-':>8} {'-':>13}")
            continue
        t_c = best_time(_jacobi.jacobi_eigh, a, args.repeats)
        w_py = np.sort(_jacobi_py.jacobi_eigh(a, 1e-12, 100)[0])
        w_c = np.sort(_jacobi.jacobi_eigh(a, 1e-12, 100)[0])
        diff = float(np.max(np.abs(w_py - w_c)))
        print(f"{n:>4} {t_py:>10.4f} {t_c:>10.4f} {t_py / t_c:>8.1f} {diff:>13.2e}")


if __name__ == "__main__":
    main()
