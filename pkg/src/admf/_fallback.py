"""Pure NumPy implementations of the compiled kernels.

Same signatures and return conventions as ``admf._kernels``; used when the
extension is not built or when ``ADMF_PURE_PYTHON=1``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def dtw_distance(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = b.shape[0]
    prev = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for x in a:
        cost = np.abs(x - b)
        cur = np.empty(m + 1)
        cur[0] = np.inf
        # diagonal/vertical moves vectorise; the horizontal move is a running scan
        diag_up = np.minimum(prev[:-1], prev[1:])
        for j in range(1, m + 1):
            cur[j] = cost[j - 1] + min(diag_up[j - 1], cur[j - 1])
        prev = cur
    return float(prev[m])


def dtw_matrix(series):
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dtw_distance(series[i], series[j])
    return out


def rolling_cov(r, n_lag):
    r = np.asarray(r, dtype=np.float64)
    win = sliding_window_view(r, n_lag, axis=0)  # (n_win, n, n_lag)
    centred = win - win.mean(axis=2, keepdims=True)
    cov = np.einsum("wat,wbt->wab", centred, centred) / (n_lag - 1.0)
    return 0.5 * (cov + cov.transpose(0, 2, 1))


def project_simplex(v):
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def minvar_pg(S, step, tol, max_iter, w0):
    S = np.asarray(S, dtype=np.float64)
    w = np.array(w0, dtype=np.float64)
    y = w.copy()
    t = 1.0
    f_old = np.inf
    res = np.inf
    k = 0
    while k < max_iter:
        wn = project_simplex(y - step * 2.0 * (S @ y))
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / tn
        f_new = wn @ S @ wn
        if f_new > f_old:
            tn, beta = 1.0, 0.0
        y = wn + beta * (wn - w)
        w = wn
        t = tn
        f_old = f_new
        k += 1
        res = np.max(np.abs(project_simplex(w - step * 2.0 * (S @ w)) - w))
        if res <= tol:
            break
    return w, k, float(res)
