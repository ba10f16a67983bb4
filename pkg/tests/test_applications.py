import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admf import applications as app


def _random_psd(n, rng):
    A = rng.standard_normal((n, n + 2))
    return A @ A.T / (n + 2)


# ---------------------------------------------------------------- covariance

def test_predicted_covariance_examples():
    np.testing.assert_array_equal(app.predicted_covariance(np.eye(2), [2, 3]), np.diag([4.0, 9]))
    off = app.predicted_covariance(np.array([[1, 0.5], [0.5, 1]]), [1, 2])
    assert off[0, 1] == off[1, 0] == 1.0
    G = np.array([[1, -0.2], [-0.2, 1]])
    np.testing.assert_array_equal(app.predicted_covariance(G, [1, 1]), G)
    with pytest.raises(ValueError):
        app.predicted_covariance(np.eye(2), [1, 2, 3])
    with pytest.raises(ValueError):
        app.predicted_covariance(np.eye(2), [1, 0])


def test_realized_covariance_window():
    r = np.arange(20.0).reshape(10, 2) ** 1.5
    np.testing.assert_allclose(app.realized_covariance(r, 3, 4), np.cov(r[4:8].T))
    with pytest.raises(app.InsufficientHistoryError):
        app.realized_covariance(r, 6, 4)


# ---------------------------------------------------------------- min variance

def test_min_variance_closed_forms():
    np.testing.assert_allclose(app.min_variance_weights(np.eye(4)), 0.25, atol=1e-10)
    np.testing.assert_allclose(app.min_variance_weights(np.diag([0.04, 0.01])), [0.2, 0.8],
                               atol=1e-8)
    w = app.min_variance_weights(np.diag([0.0, 0.02, 0.03]))
    np.testing.assert_allclose(w, [1, 0, 0], atol=1e-8)
    np.testing.assert_allclose(app.min_variance_weights(np.zeros((3, 3))), 1 / 3)


@pytest.mark.parametrize("seed", range(5))
def test_min_variance_grid_oracle(seed):
    S = _random_psd(3, np.random.default_rng(seed))
    w = app.min_variance_weights(S)
    best = np.inf
    for i, j in itertools.product(range(101), repeat=2):
        if i + j <= 100:
            g = np.array([i, j, 100 - i - j]) / 100
            best = min(best, g @ S @ g)
    obj = w @ S @ w
    assert obj <= best + 1e-12
    assert best - obj <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2 ** 31))
def test_min_variance_properties(n, seed):
    rng = np.random.default_rng(seed)
    S = _random_psd(n, rng)
    w = app.min_variance_weights(S)
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-8
    eq = np.full(n, 1 / n)
    assert w @ S @ w <= eq @ S @ eq + 1e-9
    assert app.kkt_residual(S, w) <= 1e-6
    # best of 10 random feasible restarts polished by the same solver
    for _ in range(10):
        w0 = rng.dirichlet(np.ones(n))
        assert w @ S @ w <= w0 @ S @ w0 + 1e-10


def test_min_variance_errors():
    S = _random_psd(6, np.random.default_rng(0))
    with pytest.raises(app.ConvergenceError) as info:
        app.min_variance_weights(S, tol=1e-14, max_iter=1)
    assert info.value.residual > 1e-14
    with pytest.raises(ValueError):
        app.min_variance_weights(np.ones((2, 3)))
    with pytest.raises(ValueError):
        app.min_variance_weights(np.array([[1.0, np.nan], [np.nan, 1.0]]))


# ---------------------------------------------------------------- portfolio backtest

def test_portfolio_hand_fixture():
    true = np.array([np.diag([0.04, 0.01]), np.diag([0.01, 0.04])])
    pred = np.array([np.eye(2), np.eye(2)])
    s = np.array([[0.2, 0.1], [0.2, 0.1]])  # right on date 0, wrong on date 1
    results, summary = app.portfolio_backtest(pred, true, s=s, timestamps=["d0", "d1"])
    model = [r for r in results if r.method == "model"]
    np.testing.assert_allclose(model[0].weights, [0.2, 0.8], atol=1e-8)
    np.testing.assert_allclose(model[1].weights, [0.2, 0.8], atol=1e-8)
    assert model[0].realized_risk == pytest.approx(0.008, abs=1e-10)
    assert model[1].realized_risk == pytest.approx(0.026, abs=1e-10)
    assert summary["model"] == pytest.approx(0.017, abs=1e-10)
    assert summary["Optimal"] == pytest.approx(0.008, abs=1e-10)


def test_portfolio_truth_equals_optimal_and_bound(tmp_path):
    rng = np.random.default_rng(4)
    true = np.array([_random_psd(5, rng) for _ in range(6)])
    sd = np.sqrt(np.diagonal(true, axis1=1, axis2=2))
    corr = true / (sd[:, :, None] * sd[:, None, :])
    res, summ = app.portfolio_backtest(corr, true)
    m = [r.realized_risk for r in res if r.method == "model"]
    o = [r.realized_risk for r in res if r.method == "Optimal"]
    np.testing.assert_allclose(m, o, atol=1e-9)
    noisy = np.clip(corr + 0.3 * rng.standard_normal(corr.shape), -1, 1)
    noisy = 0.5 * (noisy + noisy.transpose(0, 2, 1))
    noisy[:, range(5), range(5)] = 1
    res, summ = app.portfolio_backtest(noisy, true, method="noisy")
    m = [r.realized_risk for r in res if r.method == "noisy"]
    o = [r.realized_risk for r in res if r.method == "Optimal"]
    assert all(a >= b - 1e-9 for a, b in zip(m, o))
    assert summ["noisy"] >= summ["Optimal"] - 1e-9
    app.write_portfolio_csv(res, tmp_path / "p.csv")
    back = app.read_portfolio_csv(tmp_path / "p.csv")
    assert [b["realized_risk"] for b in back] == [r.realized_risk for r in res]
    assert [b["method"] for b in back] == [r.method for r in res]


def test_portfolio_alignment_errors():
    with pytest.raises(ValueError):
        app.portfolio_backtest(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        app.portfolio_backtest(np.array([np.eye(2)]), np.array([np.eye(2)]), timestamps=[1, 2])
    with pytest.raises(ValueError):
        app.PortfolioResult(0, [0.7, 0.7], 0.0, 0.0)


# ---------------------------------------------------------------- pair trading

def test_pair_trade_hand_ledger():
    # spreads -1, +1 (mean 0) then +2 at entry; legs converge by 2 on the last day
    pa = [10, 11, 12, 12, 12, 12, 12, 11]
    pb = [11, 10, 10, 10, 10, 10, 10, 11]
    corr = [0.9] * 5 + [0.1]
    rep = app.pair_trade_backtest(pa, pb, corr, theta=0.7, capital=1.0, period=1,
                                  start=2, lookback=2)
    pnl = 0.5 * ((11 / 10 - 1) - (11 / 12 - 1))  # long b, short a
    assert len(rep.trades) == 1
    t = rep.trades[0]
    assert t.direction == app.LONG_BETA and (t.entry_date, t.exit_date) == (2, 7)
    assert t.pnl == pytest.approx(pnl, abs=1e-15)
    assert rep.win_loss_rate == 1.0
    assert rep.profit_rate == pytest.approx(pnl, abs=1e-15)
    np.testing.assert_allclose(rep.equity, [1, 1, 1, 1, 1, 1 + pnl])
    assert rep.max_drawdown == 0.0 and rep.n_entries == 1 and rep.n_allocations == 5


def test_pair_trade_below_mean_goes_long_alpha():
    pa = [10, 12, 10, 10.5]
    pb = [11, 10, 11, 10.5]
    rep = app.pair_trade_backtest(pa, pb, [0.9, 0.1], period=1, start=2, lookback=2)
    assert rep.trades[0].direction == app.LONG_ALPHA
    assert rep.trades[0].pnl == pytest.approx(0.5 * (0.05 - (10.5 / 11 - 1)))


@pytest.mark.parametrize("corr", [[0.5] * 10, [0.95] * 10])
def test_pair_trade_never_enters(corr):
    rng = np.random.default_rng(0)
    pa = 100 * np.exp(np.cumsum(0.01 * rng.standard_normal(300)))
    pb = 100 * np.exp(np.cumsum(0.01 * rng.standard_normal(300)))
    theta = 0.7 if corr[0] < 0.7 else 1.01
    rep = app.pair_trade_backtest(pa, pb, corr, theta=theta, period=5)
    assert rep.trades == [] and rep.n_entries == 0
    assert rep.profit_rate == 0.0 and rep.max_drawdown == 0.0
    assert not rep.sharpe_defined and rep.sharpe_ratio == 0.0


def test_pair_trade_constant_prices_flag():
    p = np.full(300, 50.0)
    rep = app.pair_trade_backtest(p, p.copy(), [0.9] * 3, period=10)
    assert rep.n_entries == 1 and rep.sharpe_ratio == 0.0 and not rep.sharpe_defined
    assert "undefined" in rep.summary()
    np.testing.assert_array_equal(rep.equity, 1.0)


def _walks(seed, n=500):
    rng = np.random.default_rng(seed)
    common = np.cumsum(0.01 * rng.standard_normal(n))
    pa = 50 * np.exp(common + np.cumsum(0.005 * rng.standard_normal(n)))
    pb = 40 * np.exp(common + np.cumsum(0.005 * rng.standard_normal(n)))
    return pa, pb, rng


@pytest.mark.parametrize("mode", ["hold", "rebalance"])
@pytest.mark.parametrize("seed", range(4))
def test_pair_trade_ledger_conservation(seed, mode):
    pa, pb, rng = _walks(seed)
    corr = rng.uniform(0.3, 1.0, 30)
    rep = app.pair_trade_backtest(pa, pb, corr, theta=0.7, capital=2.0, period=7, mode=mode)
    total = sum(t.pnl for t in rep.trades) + rep.open_pnl
    assert abs(total - (rep.equity[-1] - 2.0)) <= 1e-8
    assert 0 <= rep.max_drawdown <= 1 and 0 <= rep.win_loss_rate <= 1
    assert rep.equity.size == 500 - 252


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_pair_trade_threshold_monotone(corr, t1, t2):
    lo, hi = sorted((t1, t2))
    pa, pb, _ = _walks(1, 400)
    runs = {}
    for mode in ("hold", "rebalance"):
        a = app.pair_trade_backtest(pa, pb, corr, theta=lo, period=7, mode=mode)
        b = app.pair_trade_backtest(pa, pb, corr, theta=hi, period=7, mode=mode)
        runs[mode] = (a, b)
        assert b.n_allocations <= a.n_allocations
    a, b = runs["rebalance"]
    assert b.n_entries <= a.n_entries


def test_hold_mode_round_trips_can_grow_with_theta():
    # a dip below the higher threshold splits one held trade into two
    pa, pb, _ = _walks(2, 300)
    corr = [0.8, 0.6, 0.8]
    low = app.pair_trade_backtest(pa, pb, corr, theta=0.5, period=10)
    high = app.pair_trade_backtest(pa, pb, corr, theta=0.7, period=10)
    assert (low.n_entries, high.n_entries) == (1, 2)
    assert (low.n_allocations, high.n_allocations) == (3, 2)


def test_pair_trade_errors_and_log_roundtrip(tmp_path):
    pa, pb, _ = _walks(3, 300)
    with pytest.raises(app.InsufficientHistoryError):
        app.pair_trade_backtest(pa[:200], pb[:200], [0.9])
    with pytest.raises(ValueError):
        app.pair_trade_backtest(pa, pb, [0.9], capital=0)
    with pytest.raises(ValueError):
        app.pair_trade_backtest(pa, pb[:-1], [0.9])
    with pytest.raises(ValueError):
        app.pair_trade_backtest(pa, pb, [0.9], mode="other")
    with pytest.raises(ValueError):
        app.PairTradeState(position="sideways")
    rep = app.pair_trade_backtest(pa, pb, [0.9, 0.1, 0.9, 0.1], period=10, mode="hold")
    app.write_trade_log(rep.trades, tmp_path / "t.csv")
    back = app.read_trade_log(tmp_path / "t.csv")
    assert [(t.direction, t.pnl) for t in back] == [(t.direction, t.pnl) for t in rep.trades]
    assert [int(t.entry_date) for t in back] == [t.entry_date for t in rep.trades]


def test_drawdown_and_sharpe_helpers():
    assert app.max_drawdown([1, 2, 1, 3]) == pytest.approx(0.5)
    assert app.max_drawdown([]) == 0.0
    eq = np.array([1.0, 1.01, 1.0, 1.02])
    r = eq[1:] / eq[:-1] - 1
    val, ok = app.sharpe_ratio(eq)
    assert ok and val == pytest.approx(r.mean() / r.std(ddof=1) * np.sqrt(252))
