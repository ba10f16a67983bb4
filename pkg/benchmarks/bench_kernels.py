"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel: best-of-N wall time for each backend and the
speedup. Both backends are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from admf import _fallback

try:
    from admf import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    r = rng.standard_normal((3739, 32)) * 0.01
    series = rng.standard_normal((32, 178))
    A = rng.standard_normal((32, 32))
    S = A @ A.T / 32 + 1e-3 * np.eye(32)
    step = 1.0 / (2.0 * np.linalg.eigvalsh(S)[-1])
    w0 = np.full(32, 1 / 32)
    v = rng.standard_normal(256)
    return {
        "rolling_cov (3739x32, n_lag=42)": ("rolling_cov", (r, 42)),
        "dtw_matrix (32 series x 178)": ("dtw_matrix", (series,)),
        "dtw_distance (2 x 2000)": ("dtw_distance", (rng.standard_normal(2000),
                                                     rng.standard_normal(2000))),
        "project_simplex (n=256)": ("project_simplex", (v,)),
        "minvar_pg (n=32)": ("minvar_pg", (S, step, 1e-10, 100000, w0)),
    }


def _agree(a, b):
    if isinstance(a, tuple):
        return np.allclose(a[0], b[0], atol=1e-8)
    return np.allclose(a, b, atol=1e-8)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speedup':>8s}")
    for label, (name, inputs) in cases(rng).items():
        py = getattr(_fallback, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{label:36s} {t_py * 1e3:12.3f} {'-':>12s} {'-':>8s}")
            continue
        cy = getattr(_kernels, name)
        if not _agree(py(*inputs), cy(*inputs)):
            raise SystemExit(f"backends disagree on {name}")
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=1, repeat=args.repeat))
        print(f"{label:36s} {t_py * 1e3:12.3f} {t_cy * 1e3:12.3f} {t_py / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
