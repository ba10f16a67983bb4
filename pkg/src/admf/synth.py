"""Synthetic markets from multidimensional GBM and MoE expert-usage profiles.

A market factor is a triplet (correlation matrix, drift, volatility). A
scenario is a list of phases; each phase draws prices from one factor or
mixes the log returns of two factors with weight ``w``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from admf.data import PriceTable, ReturnTable


class FactorError(ValueError):
    pass


@dataclass
class MarketFactor:
    cm: np.ndarray
    exp: np.ndarray
    vol: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.cm = np.asarray(self.cm, dtype=np.float64)
        n = self.cm.shape[0]
        self.exp = np.broadcast_to(np.asarray(self.exp, dtype=np.float64), (n,)).copy()
        self.vol = np.broadcast_to(np.asarray(self.vol, dtype=np.float64), (n,)).copy()
        if self.cm.shape != (n, n) or np.max(np.abs(self.cm - self.cm.T)) > 1e-10:
            raise FactorError("cm must be a symmetric square matrix")
        if np.max(np.abs(np.diag(self.cm) - 1.0)) > 1e-8:
            raise FactorError("cm must have a unit diagonal")
        if np.linalg.eigvalsh(self.cm).min() < -1e-8:
            raise FactorError("cm is not positive semidefinite")
        if np.any(self.vol < 0):
            raise FactorError("vol must be nonnegative")

    @property
    def n_assets(self):
        return self.cm.shape[0]


@dataclass
class Phase:
    factors: tuple       # indices into ScenarioSpec.factors; one or two
    days: int
    regime: int
    w: float = 0.0       # mixing weight on the second factor

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        if self.days <= 0:
            raise ValueError("phase days must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("mixing weight must lie in [0, 1]")
        if len(self.factors) not in (1, 2):
            raise ValueError("a phase uses one factor or mixes two")


@dataclass
class ScenarioSpec:
    phases: list
    factors: list
    shared_noise: bool = False  # reuse one return path per factor across phases

    @property
    def n_assets(self):
        return self.factors[0].n_assets


@dataclass
class Scenario:
    prices: PriceTable
    returns: ReturnTable
    phase_labels: np.ndarray   # per return day, 1-based phase id
    regime_labels: np.ndarray  # per return day
    phase_regimes: dict = field(default_factory=dict)


@dataclass
class ExpertUsageProfile:
    weights: np.ndarray  # (n_phases, n_exp)
    phases: list
    n_exp: int
    top_k: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or np.any(self.weights > 1.0 / self.top_k + 1e-12):
            raise ValueError("usage weights must lie in [0, 1/top_k]")
        if np.any(self.weights.sum(axis=1) > 1 + 1e-6):
            raise ValueError("usage rows must sum to at most 1")


def _haar_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_correlation_matrix(n, eig_low=0.1, eig_high=2.0, rng=None, eigenvalues=None):
    """Random correlation matrix with a prescribed spectrum (Givens-rotation construction).

    Eigenvalues are drawn uniformly from ``[eig_low, eig_high]`` (or taken from
    ``eigenvalues``) and rescaled to sum to ``n``; a random orthogonal
    similarity of their diagonal is then rotated pairwise until every diagonal
    entry equals one. Each rotation acts on a pair whose diagonal entries
    straddle one, so the spectrum is untouched.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(rng)
    lam = (np.asarray(eigenvalues, dtype=np.float64) if eigenvalues is not None
           else rng.uniform(eig_low, eig_high, size=n))
    if lam.shape != (n,) or np.any(lam < 0):
        raise ValueError("need n nonnegative eigenvalues")
    lam = lam * (n / lam.sum())
    Q = _haar_orthogonal(n, rng)
    A = (Q * lam) @ Q.T
    A = 0.5 * (A + A.T)
    tol = 1e-14
    for _ in range(n):
        d = np.diag(A)
        low = np.nonzero(d < 1 - tol)[0]
        high = np.nonzero(d > 1 + tol)[0]
        if low.size == 0 or high.size == 0:
            break
        i, j = low[0], high[0]
        aii, ajj, aij = A[i, i], A[j, j], A[i, j]
        disc = math.sqrt(max(aij * aij - (aii - 1.0) * (ajj - 1.0), 0.0))
        # stable root of t^2 (ajj - 1) - 2 t aij + (aii - 1) = 0
        t = (aii - 1.0) / (aij + math.copysign(disc, aij))
        c = 1.0 / math.sqrt(1.0 + t * t)
        s = c * t
        ri, rj = A[i].copy(), A[j].copy()
        A[i], A[j] = c * ri - s * rj, s * ri + c * rj
        ci, cj = A[:, i].copy(), A[:, j].copy()
        A[:, i], A[:, j] = c * ci - s * cj, s * ci + c * cj
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 1.0)
    return A


def random_factor(n, rng, exp_range=(0.1, 0.5), vol_range=(0.01, 0.1)):
    """One market factor: random cm, scalar drift and volatility broadcast to all assets."""
    rng = np.random.default_rng(rng)
    cm = random_correlation_matrix(n, rng=rng)
    return MarketFactor(cm, rng.uniform(*exp_range), rng.uniform(*vol_range))


def _sqrt_factor(cm):
    try:
        return np.linalg.cholesky(cm)
    except np.linalg.LinAlgError:
        lam, P = np.linalg.eigh(cm)
        if lam.min() < -1e-8:
            raise FactorError("cm is not positive semidefinite") from None
        return P * np.sqrt(np.clip(lam, 0.0, None))


def mgbm_log_returns(factor, days, dt=1 / 252, rng=None):
    """Exact-scheme GBM log returns ``(days, n)``."""
    rng = np.random.default_rng(rng if rng is not None else factor.seed)
    L = _sqrt_factor(factor.cm)
    z = rng.standard_normal((days, factor.n_assets)) @ L.T
    return (factor.exp - 0.5 * factor.vol ** 2) * dt + factor.vol * math.sqrt(dt) * z


def _dates(n):
    start = np.datetime64("2000-01-03")
    return [str(d) for d in np.busday_offset(start, np.arange(n), roll="forward")]


def _assets(n):
    return [f"A{i:03d}" for i in range(n)]


def prices_from_returns(returns, p0=100.0, assets=None, dates=None):
    returns = np.asarray(returns, dtype=np.float64)
    n = returns.shape[1]
    logp = np.vstack([np.zeros(n), np.cumsum(returns, axis=0)])
    return PriceTable(assets or _assets(n), dates or _dates(len(logp)),
                      np.broadcast_to(np.asarray(p0, dtype=np.float64), (n,)) * np.exp(logp))


def simulate_mgbm(factor, days, p0=100.0, dt=1 / 252, rng=None):
    """Price table with ``days + 1`` rows (``p0`` first)."""
    if days < 1:
        raise ValueError("days must be >= 1")
    return prices_from_returns(mgbm_log_returns(factor, days, dt, rng), p0)


def scenario1_spec(n_assets=32, n_regimes=5, phases_per_regime=3, days=300, seed=0):
    """One factor per regime; regimes' phases sit next to each other."""
    seeds = np.random.SeedSequence(seed).spawn(n_regimes)
    factors = [random_factor(n_assets, np.random.default_rng(s)) for s in seeds]
    phases = [Phase((r,), days, regime=r + 1)
              for r in range(n_regimes) for _ in range(phases_per_regime)]
    return ScenarioSpec(phases, factors, shared_noise=False)


def scenario2_spec(factors, n_phases=10, days=300):
    """Mix two factors' log returns with ``w = (j - 1) / (n_phases - 1)``."""
    if len(factors) != 2:
        raise FactorError("scenario 2 mixes exactly two factors")
    phases = [Phase((0, 1), days, regime=j, w=(j - 1) / (n_phases - 1))
              for j in range(1, n_phases + 1)]
    return ScenarioSpec(phases, list(factors), shared_noise=True)


def build_scenario(spec, rng=None, dt=1 / 252, p0=100.0):
    """Concatenate the phases' log returns and integrate them into prices."""
    if not spec.factors:
        raise FactorError("scenario has no factors")
    for ph in spec.phases:
        if max(ph.factors) >= len(spec.factors):
            raise FactorError(f"phase references missing factor {max(ph.factors)}")
    ss = np.random.SeedSequence(rng if isinstance(rng, (int, np.integer)) or rng is None
                                else rng.integers(2 ** 63))
    if spec.shared_noise:
        days = {ph.days for ph in spec.phases}
        if len(days) != 1:
            raise ValueError("shared noise needs equal phase lengths")
        n_days = days.pop()
        shared = [mgbm_log_returns(f, n_days, dt, np.random.default_rng(s))
                  for f, s in zip(spec.factors, ss.spawn(len(spec.factors)))]
    chunks, phase_ids, regimes = [], [], []
    for j, (ph, s) in enumerate(zip(spec.phases, ss.spawn(len(spec.phases))), start=1):
        if spec.shared_noise:
            paths = [shared[f] for f in ph.factors]
        else:
            prng = np.random.default_rng(s)
            paths = [mgbm_log_returns(spec.factors[f], ph.days, dt, prng) for f in ph.factors]
        r = paths[0] if len(paths) == 1 else (1.0 - ph.w) * paths[0] + ph.w * paths[1]
        chunks.append(r)
        phase_ids += [j] * ph.days
        regimes += [ph.regime] * ph.days
    returns = np.vstack(chunks)
    pt = prices_from_returns(returns, p0)
    rt = ReturnTable(pt.assets, pt.dates[1:], returns)
    return Scenario(pt, rt, np.array(phase_ids), np.array(regimes),
                    {j: ph.regime for j, ph in enumerate(spec.phases, start=1)})


def scenario3_from_prices(pt):
    """Real prices split into calendar-year phases (regime = phase)."""
    r = np.diff(np.log(pt.prices), axis=0)
    years = [d[:4] for d in pt.dates[1:]]
    uniq = sorted(set(years))
    ids = np.array([uniq.index(y) + 1 for y in years])
    return Scenario(pt, ReturnTable(pt.assets, pt.dates[1:], r), ids, ids.copy(),
                    {j: j for j in range(1, len(uniq) + 1)})


def sample_phase(samples, phase_labels, n_lag, pure=False):
    """Phase id of each sample's anchor day, or None when ``pure`` and the input
    span (first input window start .. anchor) crosses a phase boundary."""
    out = []
    for s in samples:
        t_anchor = s.anchor + n_lag - 1
        ph = int(phase_labels[t_anchor])
        if pure:
            t0 = s.input_indices[0]  # window (t0_ts - n_lag, t0_ts] starts at return row t0
            if np.any(phase_labels[t0:t_anchor + 1] != ph):
                ph = None
        out.append(ph)
    return out


@torch.no_grad()
def expert_usage(model, phase_windows, batch=256, block="quad"):
    """Mean importance ``(1/top_k if selected else 0)`` of each expert per phase.

    ``phase_windows`` maps phase id -> windows ``(N, k, 1, n, n)``. The gate of
    the quadratic-coefficient block is read with noise off.
    """
    tb = getattr(model, "transform_block", None)
    if tb is None:
        raise ValueError("model has no MoE transform")
    moe = getattr(tb, block)
    cfg = moe.cfg
    model.eval()
    dtype = next(model.parameters()).dtype
    rows, phases = [], []
    for ph, X in phase_windows.items():
        X = torch.as_tensor(np.asarray(X), dtype=dtype)
        if X.shape[0] == 0:
            raise ValueError(f"phase {ph} has no samples")
        counts = np.zeros(cfg.n_exp)
        for s in range(0, X.shape[0], batch):
            x = model.apply_rearrangement(X[s:s + batch])
            phi = tb.features(x)
            sel = moe.gate(phi).selected.numpy()
            counts += np.bincount(sel.ravel(), minlength=cfg.n_exp)
        rows.append(counts / (cfg.top_k * X.shape[0]))
        phases.append(ph)
    return ExpertUsageProfile(np.array(rows), phases, cfg.n_exp, cfg.top_k)


def regime_similarity(profile, phase_regimes):
    """Mean cosine similarity of usage rows within regimes and across regimes."""
    W = profile.weights
    norms = np.linalg.norm(W, axis=1)
    C = (W @ W.T) / np.outer(norms, norms)
    reg = [phase_regimes[p] for p in profile.phases]
    within, cross = [], []
    for a in range(len(reg)):
        for b in range(a + 1, len(reg)):
            (within if reg[a] == reg[b] else cross).append(C[a, b])
    return float(np.mean(within)), float(np.mean(cross))


def write_usage(profile, path, long_path=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase"] + [f"expert_{i + 1}" for i in range(profile.n_exp)])
        for ph, row in zip(profile.phases, profile.weights):
            w.writerow([ph] + [repr(float(v)) for v in row])
    if long_path is not None:
        with open(long_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "expert", "weight"])
            for ph, row in zip(profile.phases, profile.weights):
                for i, v in enumerate(row):
                    w.writerow([ph, i + 1, repr(float(v))])
