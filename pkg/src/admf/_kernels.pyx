# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Pure-NumPy twins live in ``admf._fallback``."""

import numpy as np

from libc.math cimport fabs, sqrt, INFINITY
from libc.stdlib cimport malloc, free


cdef double _dtw(const double[::1] a, const double[::1] b) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef double *prev = <double *> malloc((m + 1) * sizeof(double))
    cdef double *cur = <double *> malloc((m + 1) * sizeof(double))
    cdef double *tmp
    cdef double best, out
    prev[0] = 0.0
    for j in range(1, m + 1):
        prev[j] = INFINITY
    for i in range(1, n + 1):
        cur[0] = INFINITY
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = fabs(a[i - 1] - b[j - 1]) + best
        tmp = prev
        prev = cur
        cur = tmp
    out = prev[m]
    free(prev)
    free(cur)
    return out


def dtw_distance(const double[::1] a, const double[::1] b):
    return _dtw(a, b)


def dtw_matrix(const double[:, ::1] series):
    """Pairwise DTW over the rows of ``series`` (equal-length rows)."""
    cdef Py_ssize_t n = series.shape[0], i, j
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] d = out
    cdef double v
    for i in range(n):
        for j in range(i + 1, n):
            v = _dtw(series[i], series[j])
            d[i, j] = v
            d[j, i] = v
    return out


def rolling_cov(const double[:, ::1] r, Py_ssize_t n_lag):
    """Two-pass sample covariance of every trailing window of ``n_lag`` rows."""
    cdef Py_ssize_t T = r.shape[0], n = r.shape[1]
    cdef Py_ssize_t n_win = T - n_lag + 1, w, s, a, b
    out = np.empty((n_win, n, n), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef double *mean = <double *> malloc(n * sizeof(double))
    cdef double acc, denom = n_lag - 1.0
    for w in range(n_win):
        for a in range(n):
            acc = 0.0
            for s in range(w, w + n_lag):
                acc += r[s, a]
            mean[a] = acc / n_lag
        for a in range(n):
            for b in range(a, n):
                acc = 0.0
                for s in range(w, w + n_lag):
                    acc += (r[s, a] - mean[a]) * (r[s, b] - mean[b])
                acc /= denom
                o[w, a, b] = acc
                o[w, b, a] = acc
    free(mean)
    return out


cdef void _project_simplex(const double *v, double *out, Py_ssize_t n) noexcept nogil:
    # bisection on the soft-threshold level, then an exact refit on the support
    cdef Py_ssize_t i, it
    cdef double lo, hi, mid, s, vmax = v[0], vmin = v[0]
    for i in range(1, n):
        if v[i] > vmax:
            vmax = v[i]
        if v[i] < vmin:
            vmin = v[i]
    lo = vmin - 1.0
    hi = vmax
    for it in range(200):
        mid = 0.5 * (lo + hi)
        s = 0.0
        for i in range(n):
            if v[i] > mid:
                s += v[i] - mid
        if s > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * (1.0 + fabs(hi)):
            break
    # refine on the active support for an exact unit sum
    s = 0.0
    it = 0
    for i in range(n):
        if v[i] > hi:
            s += v[i]
            it += 1
    if it > 0:
        mid = (s - 1.0) / it
    else:
        mid = hi
    for i in range(n):
        out[i] = v[i] - mid if v[i] > mid else 0.0


def project_simplex(const double[::1] v):
    cdef Py_ssize_t n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    _project_simplex(&v[0], &o[0], n)
    return out


def minvar_pg(const double[:, ::1] S, double step, double tol, Py_ssize_t max_iter,
              const double[::1] w0):
    """Accelerated projected gradient for min w'Sw on the unit simplex.

    Returns ``(w, iterations, residual)`` where residual is the sup-norm of
    ``w - P(w - step * grad)``.
    """
    cdef Py_ssize_t n = S.shape[0], i, j, k
    w_arr = np.array(w0, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef double *y = <double *> malloc(n * sizeof(double))
    cdef double *z = <double *> malloc(n * sizeof(double))
    cdef double *wn = <double *> malloc(n * sizeof(double))
    cdef double t = 1.0, tn, beta, res = INFINITY, acc, d, f_old, f_new
    for i in range(n):
        y[i] = w[i]
    k = 0
    f_old = INFINITY
    while k < max_iter:
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += S[i, j] * y[j]
            z[i] = y[i] - step * 2.0 * acc
        _project_simplex(z, wn, n)
        tn = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / tn
        # objective at the new iterate, used for adaptive restart
        f_new = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += S[i, j] * wn[j]
            f_new += wn[i] * acc
        if f_new > f_old:
            tn = 1.0
            beta = 0.0
        for i in range(n):
            y[i] = wn[i] + beta * (wn[i] - w[i])
            w[i] = wn[i]
        t = tn
        f_old = f_new
        k += 1
        # fixed-point residual at w
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += S[i, j] * w[j]
            z[i] = w[i] - step * 2.0 * acc
        _project_simplex(z, wn, n)
        res = 0.0
        for i in range(n):
            d = fabs(wn[i] - w[i])
            if d > res:
                res = d
        if res <= tol:
            break
    free(y)
    free(z)
    free(wn)
    return w_arr, k, res
