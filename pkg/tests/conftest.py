import numpy as np
import pytest
import torch

from admf import _fallback

try:
    from admf import _kernels
except ImportError:
    _kernels = None

BACKENDS = [pytest.param(_fallback, id="python"),
            pytest.param(_kernels, id="cython",
                         marks=pytest.mark.skipif(_kernels is None, reason="extension not built"))]


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def two_pass_cov(x):
    """Brute-force sample covariance: mean first, then centered products."""
    x = np.asarray(x, dtype=np.float64)
    n, m = x.shape
    mu = [sum(x[t, a] for t in range(n)) / n for a in range(m)]
    out = np.empty((m, m))
    for a in range(m):
        for b in range(m):
            out[a, b] = sum((x[t, a] - mu[a]) * (x[t, b] - mu[b]) for t in range(n)) / (n - 1)
    return out


def write_csv(path, rows, header="date,asset,close"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def fd_gradcheck(loss_fn, params, eps=1e-4, rtol=1e-3):
    """Compare autograd with central differences, one tensor at a time.

    Returns the worst relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` over
    the listed (float64) parameter tensors.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, ga in zip(params, analytic):
            ga = torch.zeros_like(p) if ga is None else ga
            gn = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                gn.view(-1)[i] = (up - down) / (2 * eps)
            scale = max(ga.norm().item(), gn.norm().item())
            if scale > 0:
                worst = max(worst, (ga - gn).norm().item() / scale)
    return worst


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one acceptance line."""
    def record(n, ok, detail=""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        request.config.stash.setdefault(_CRITERIA, {})[(n, request.node.name)] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (k[0], k[1])):
        terminalreporter.write_line(lines[key])
