"""Kernel backend selection.

The compiled ``_kernels`` module is used when importable; otherwise (or with
``ADMF_PURE_PYTHON=1`` in the environment) the NumPy fallback is used.
"""
import os

import numpy as np

from admf import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("ADMF_PURE_PYTHON") != "1":
    try:
        from admf import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def dtw_distance(a, b):
    return float(_impl.dtw_distance(np.ascontiguousarray(a, dtype=np.float64),
                                    np.ascontiguousarray(b, dtype=np.float64)))


def dtw_matrix(series):
    return _impl.dtw_matrix(np.ascontiguousarray(series, dtype=np.float64))


def rolling_cov(returns, n_lag):
    return _impl.rolling_cov(np.ascontiguousarray(returns, dtype=np.float64), int(n_lag))


def project_simplex(v):
    return _impl.project_simplex(np.ascontiguousarray(v, dtype=np.float64))


def minvar_pg(S, step, tol, max_iter, w0):
    return _impl.minvar_pg(np.ascontiguousarray(S, dtype=np.float64), float(step),
                           float(tol), int(max_iter),
                           np.ascontiguousarray(w0, dtype=np.float64))
