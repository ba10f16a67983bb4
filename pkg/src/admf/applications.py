"""Downstream uses of predicted ADMs: minimum-variance portfolios and a
correlation-gated pair-trading backtest."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from admf import _core
from admf.forecaster import enforce_psd


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class InsufficientHistoryError(ValueError):
    pass


# ---------------------------------------------------------------- portfolio

@dataclass
class PortfolioResult:
    timestamp: object
    weights: np.ndarray
    predicted_risk: float
    realized_risk: float
    method: str = "model"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-8:
            raise ValueError("portfolio weights must be nonnegative and sum to 1")
        self.weights = w


def predicted_covariance(corr, s):
    """``diag(s) @ corr @ diag(s)``."""
    corr = np.asarray(corr, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if corr.ndim != 2 or corr.shape != (s.size, s.size):
        raise ValueError(f"correlation {corr.shape} does not match std vector of length {s.size}")
    if np.any(s <= 0):
        raise ValueError("standard deviations must be positive")
    out = corr * np.outer(s, s)
    return 0.5 * (out + out.T)


def min_variance_weights(cov, tol=1e-10, max_iter=200_000):
    """Long-only, fully invested minimum-variance weights.

    Accelerated projected gradient on the probability simplex (the ``<= 1`` cap
    is implied by nonnegativity and the budget), started from equal weights
    with step ``1 / (2 * lambda_max)``.

    Raises
    ------
    ConvergenceError
        If the projected-gradient fixed-point residual is above ``tol`` after
        ``max_iter`` iterations.
    """
    S = np.asarray(cov, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("covariance must be square")
    if not np.all(np.isfinite(S)):
        raise ValueError("covariance has non-finite entries")
    n = S.shape[0]
    S = 0.5 * (S + S.T)
    w0 = np.full(n, 1.0 / n)
    lam_max = float(np.linalg.eigvalsh(S)[-1])
    if lam_max <= 0:
        return w0
    w, _, res = _core.minvar_pg(S, 1.0 / (2.0 * lam_max), tol, max_iter, w0)
    if res > tol:
        raise ConvergenceError(f"no convergence in {max_iter} iterations", res)
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def kkt_residual(cov, w):
    """Sup-norm violation of the simplex-QP optimality conditions at ``w``.

    With gradient ``g = 2 S w`` and multiplier ``nu = min over the support of
    g``, optimality asks ``g_i = nu`` on the support and ``g_i >= nu`` off it.
    """
    S = np.asarray(cov, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    g = 2.0 * S @ w
    scale = max(1.0, float(np.abs(g).max()))
    supp = w > 1e-9
    nu = g[supp].mean()
    stat = np.abs(g[supp] - nu).max(initial=0.0)
    dual = np.clip(nu - g[~supp], 0.0, None).max(initial=0.0)
    primal = max(abs(w.sum() - 1.0), float(np.clip(-w, 0.0, None).max(initial=0.0)))
    return max(stat, dual) / scale + primal


def realized_covariance(returns, t, h):
    """Sample covariance of the returns in ``(t, t + h]``."""
    r = np.asarray(returns, dtype=np.float64)
    if t + h >= r.shape[0] or h < 2:
        raise InsufficientHistoryError(f"need returns through row {t + h}, have {r.shape[0]}")
    return np.cov(r[t + 1:t + h + 1], rowvar=False, ddof=1)


def portfolio_backtest(predicted, true_cov, s=None, timestamps=None, method="model",
                       psd=True):
    """Score predicted correlation ADMs by the realized risk of their portfolios.

    Parameters
    ----------
    predicted : array (T, n, n)
        Predicted correlation matrices, one per rebalance date.
    true_cov : array (T, n, n)
        Ground-truth covariance over each holding window.
    s : array (T, n), optional
        Standard deviations used to scale the predictions; defaults to the
        square root of ``true_cov``'s diagonal.
    psd : bool
        Clip negative eigenvalues of each predicted covariance before solving.

    Returns
    -------
    results : list of PortfolioResult
        The predictor's portfolios followed by the ``"Optimal"`` reference,
        which solves with the ground truth itself.
    summary : dict
        Mean realized risk per method.
    """
    P = np.asarray(predicted, dtype=np.float64)
    C = np.asarray(true_cov, dtype=np.float64)
    if P.shape != C.shape or P.ndim != 3:
        raise ValueError(f"predictions {P.shape} and ground truth {C.shape} are not aligned")
    T = P.shape[0]
    S = np.sqrt(np.diagonal(C, axis1=1, axis2=2)) if s is None else np.asarray(s, dtype=np.float64)
    if S.shape != P.shape[:2]:
        raise ValueError("standard deviations are not aligned with the predictions")
    stamps = list(range(T)) if timestamps is None else list(timestamps)
    if len(stamps) != T:
        raise ValueError("timestamps are not aligned with the predictions")
    results = []
    for name, source in ((method, P), ("Optimal", None)):
        for i in range(T):
            if source is None:
                cov_hat = C[i]
            else:
                cov_hat = predicted_covariance(source[i], S[i])
                if psd:
                    cov_hat = enforce_psd(cov_hat)
            w = min_variance_weights(cov_hat)
            results.append(PortfolioResult(stamps[i], w, float(w @ cov_hat @ w),
                                            float(w @ C[i] @ w), name))
    summary = {name: float(np.mean([r.realized_risk for r in results if r.method == name]))
               for name in (method, "Optimal")}
    return results, summary


def write_portfolio_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "predicted_risk", "realized_risk", "method"])
        for r in results:
            w.writerow([r.timestamp, repr(float(r.predicted_risk)), repr(float(r.realized_risk)),
                        r.method])


def read_portfolio_csv(path):
    with open(path, newline="") as fh:
        return [{"date": row["date"], "predicted_risk": float(row["predicted_risk"]),
                 "realized_risk": float(row["realized_risk"]), "method": row["method"]}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- pair trading

FLAT = "flat"
LONG_ALPHA = "long_alpha_short_beta"
LONG_BETA = "long_beta_short_alpha"


@dataclass
class PairTradeState:
    position: str = FLAT
    entry_prices: tuple = (math.nan, math.nan)
    entry_index: int = -1
    capital: float = 1.0
    equity: list = field(default_factory=list)

    def __post_init__(self):
        if self.position not in (FLAT, LONG_ALPHA, LONG_BETA):
            raise ValueError(f"unknown position state {self.position!r}")

    def mark(self, pa, pb):
        """Open PnL at prices ``(pa, pb)``; half the capital on each leg."""
        if self.position == FLAT:
            return 0.0
        x = 0.5 * self.capital
        ra = pa / self.entry_prices[0] - 1.0
        rb = pb / self.entry_prices[1] - 1.0
        return float(x * (ra - rb) if self.position == LONG_ALPHA else x * (rb - ra))


@dataclass
class Trade:
    entry_date: object
    exit_date: object
    direction: str
    pnl: float


@dataclass
class BacktestReport:
    profit_rate: float
    max_drawdown: float
    sharpe_ratio: float
    win_loss_rate: float
    trades: list
    equity: np.ndarray
    open_pnl: float = 0.0
    sharpe_defined: bool = True
    n_entries: int = 0
    n_allocations: int = 0
    blown_up: bool = False

    def summary(self):
        lines = [f"profit_rate={self.profit_rate!r}", f"max_drawdown={self.max_drawdown!r}",
                 f"sharpe_ratio={self.sharpe_ratio!r}", f"win_loss_rate={self.win_loss_rate!r}"]
        if not self.sharpe_defined:
            lines.append("# sharpe undefined (zero return variance); reported as 0")
        return "\n".join(lines) + "\n"


def max_drawdown(equity):
    eq = np.asarray(equity, dtype=np.float64)
    if eq.size == 0:
        return 0.0
    peak = np.maximum.accumulate(eq)
    dd = np.where(peak > 0, (peak - eq) / peak, 1.0)
    return float(np.clip(dd.max(), 0.0, 1.0))


def sharpe_ratio(equity, periods_per_year=252):
    """Annualized mean/std of daily equity returns; ``(0.0, False)`` on zero variance."""
    eq = np.asarray(equity, dtype=np.float64)
    if eq.size < 3:
        return 0.0, False
    r = eq[1:] / eq[:-1] - 1.0
    sd = r.std(ddof=1)
    if not sd > 1e-15:
        return 0.0, False
    return float(r.mean() / sd * math.sqrt(periods_per_year)), True


def pair_trade_backtest(prices_a, prices_b, correlations, theta=0.7, capital=1.0, period=21,
                        start=252, lookback=252, dates=None, mode="hold"):
    """Correlation-gated mean-reversion pair trade.

    Decisions are taken on days ``start, start + period, ...`` using one
    predicted correlation per decision. When the prediction exceeds ``theta``
    and no position is open, the spread ``p_a - p_b`` is compared with its
    mean over the previous ``lookback`` days: above the mean we go long ``b``
    and short ``a``, otherwise the reverse, with half the current capital on
    each leg. A prediction at or below ``theta`` closes any open position.
    With ``mode="rebalance"`` an open position is closed and re-entered at every
    decision whose gate is open. Execution is at the close with no costs, and
    the equity curve is marked to market daily.
    """
    pa = np.asarray(prices_a, dtype=np.float64)
    pb = np.asarray(prices_b, dtype=np.float64)
    corr = np.asarray(correlations, dtype=np.float64).ravel()
    if pa.shape != pb.shape or pa.ndim != 1:
        raise ValueError("the two price series must be 1-D and aligned")
    if np.any(pa <= 0) or np.any(pb <= 0):
        raise ValueError("prices must be positive")
    if not capital > 0:
        raise ValueError("capital must be positive")
    if period < 1:
        raise ValueError("period must be >= 1")
    if mode not in ("hold", "rebalance"):
        raise ValueError("mode must be 'hold' or 'rebalance'")
    if start < lookback or pa.size <= start:
        raise InsufficientHistoryError(
            f"need {lookback + 1} prices up to the first decision day, have {pa.size}")
    dates = list(range(pa.size)) if dates is None else list(dates)
    decision_days = [start + j * period for j in range(corr.size) if start + j * period < pa.size]
    spread = pa - pb
    state = PairTradeState(capital=float(capital))
    trades, equity = [], []
    n_entries = n_allocations = 0
    gate = dict(zip(decision_days, corr))

    def close(day):
        pnl = state.mark(pa[day], pb[day])
        trades.append(Trade(dates[state.entry_index], dates[day], state.position, pnl))
        state.capital += pnl
        state.position, state.entry_prices, state.entry_index = FLAT, (math.nan, math.nan), -1

    for day in range(start, pa.size):
        if day in gate:
            if gate[day] > theta:
                n_allocations += 1
                if state.position != FLAT and mode == "rebalance":
                    close(day)
                if state.position == FLAT:
                    s_p = spread[day - lookback:day].mean()
                    state.position = LONG_BETA if spread[day] > s_p else LONG_ALPHA
                    state.entry_prices = (pa[day], pb[day])
                    state.entry_index = day
                    n_entries += 1
            elif state.position != FLAT:
                close(day)
        equity.append(state.capital + state.mark(pa[day], pb[day]))
    equity = np.asarray(equity)
    state.equity = equity.tolist()
    wins = sum(t.pnl > 0 for t in trades)
    sharpe, ok = sharpe_ratio(equity)
    return BacktestReport(
        profit_rate=float(equity[-1] / capital - 1.0),
        max_drawdown=max_drawdown(equity),
        sharpe_ratio=sharpe,
        win_loss_rate=wins / len(trades) if trades else 0.0,
        trades=trades,
        equity=equity,
        open_pnl=float(state.mark(pa[-1], pb[-1])),
        sharpe_defined=ok,
        n_entries=n_entries,
        n_allocations=n_allocations,
        blown_up=bool(np.any(equity <= 0)),
    )


def write_trade_log(trades, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entry_date", "exit_date", "direction", "pnl"])
        for t in trades:
            w.writerow([t.entry_date, t.exit_date, t.direction, repr(float(t.pnl))])


def read_trade_log(path):
    with open(path, newline="") as fh:
        return [Trade(r["entry_date"], r["exit_date"], r["direction"], float(r["pnl"]))
                for r in csv.DictReader(fh)]
