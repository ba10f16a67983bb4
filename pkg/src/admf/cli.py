"""``admf`` command line: build, train, eval, simulate, expert-usage, portfolio, pairs.

Every subcommand reads one INI run config (see :mod:`admf.config`) and writes
under the output root (``--out``, ``[run] out``, ``$ADMF_OUT`` or ``./admf_out``).

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from admf import applications as apps
from admf import synth
from admf.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from admf.config import ConfigError, load_config, output_root
from admf.data import (ADMSequence, DataError, SplitError, build_adm_sequence, ingest_prices,
                       log_returns, n_samples, read_adm_archive, split_samples, stack_samples,
                       window_samples, write_adm_archive, write_prices)
from admf.models import FlatLSTM, assemble_variant
from admf.rearrange import AssetOrdering, fit_ordering
from admf.training import (NumericalError, UndefinedGainError, ccm_predictions, evaluate,
                           predict, seed_everything, train)

logger = logging.getLogger("admf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _prices_path(cfg, out):
    if cfg.data.prices is not None:
        return cfg.data.prices
    sim = out / "sim" / "prices.csv"
    if sim.exists():
        return sim
    raise UsageError("no [data] prices given and no simulated prices under the output root")


def _load_prices(cfg, out):
    return ingest_prices(_prices_path(cfg, out), cfg.data.calendar_policy, cfg.data.min_assets)


def _load_dataset(cfg, out):
    """ADM sequence, manifest and the chronological split recorded by ``build``."""
    adm_dir, index = out / "adm", out / "samples.json"
    if not index.exists() or not (adm_dir / "manifest.json").exists():
        raise DataError(f"no built dataset under {out}; run 'admf build' first")
    seq, manifest = read_adm_archive(adm_dir)
    idx = json.loads(index.read_text())
    d = cfg.data
    if (idx["k"], idx["u"], idx["h"]) != (d.k, d.u, d.h) or seq.n_lag != d.n_lag:
        raise DataError("built dataset geometry differs from the config; rebuild")
    by_anchor = {s.anchor: s for s in window_samples(seq, d.k, d.u, d.h)}
    parts = {name: [by_anchor[a] for a in idx[name]] for name in ("train", "validation", "test")}
    if not all(parts.values()):
        raise DataError("the built sample index has an empty split")
    return seq, manifest, parts


def _checkpoint_path(cfg, out):
    return cfg.checkpoint if cfg.checkpoint is not None else out / "model.npz"


def _new_model(cfg, n):
    torch.manual_seed(cfg.seed)
    if cfg.variant == "LSTM":
        return FlatLSTM(n, cfg.forecaster.hidden_channels, cfg.forecaster.layers)
    return assemble_variant(cfg.variant, n, cfg.data.k, cfg.transform, cfg.forecaster)


def _install_ordering(model, out, assets):
    path = out / "ordering.txt"
    if getattr(model, "forecaster_cfg", None) is None or not model.forecaster_cfg.use_rearrangement:
        return
    if not path.exists():
        raise DataError(f"{path} missing; run 'admf build' first")
    model.set_ordering(AssetOrdering.load(path).indices(assets))


def _predictions(cfg, out, seq, samples, predictor):
    if predictor in ("previous", "truth"):
        _, Y, P = stack_samples(samples, dtype=np.float64)
        return P if predictor == "previous" else Y
    if predictor == "ccm":
        return ccm_predictions(seq, samples)
    X, _, _ = stack_samples(samples)
    model, _ = load_checkpoint(_checkpoint_path(cfg, out))
    fc = getattr(model, "forecaster_cfg", None)
    psd = bool(fc and fc.use_psd)
    renorm = bool(fc and fc.renormalize_correlation)
    return predict(model, X, psd=psd, renormalize_correlation=renorm)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_build(cfg, out):
    d = cfg.data
    pt = _load_prices(cfg, out)
    rt = log_returns(pt)
    if len(rt) < d.n_lag:
        logger.warning("%d returns are fewer than n_lag=%d; writing an empty index",
                       len(rt), d.n_lag)
        seq = None
    else:
        seq = build_adm_sequence(rt, d.n_lag, d.measure, d.degenerate_policy)
    n_adm = 0 if seq is None else len(seq)
    samples = [] if seq is None else window_samples(seq, d.k, d.u, d.h)
    index = {"k": d.k, "u": d.u, "h": d.h, "n_lag": d.n_lag, "n_adm": n_adm,
             "n_samples": n_samples(n_adm, d.k, d.u, d.h), "fractions": list(d.split),
             "train": [], "validation": [], "test": []}
    ordering = AssetOrdering.identity(rt.assets)
    if samples:
        try:
            split = split_samples(samples, d.split)
        except SplitError as exc:
            logger.warning("cannot split %d samples (%s); writing an empty index", len(samples), exc)
        else:
            index.update(train=[s.anchor for s in split.train],
                         validation=[s.anchor for s in split.validation],
                         test=[s.anchor for s in split.test])
            # ordering fitted on the returns the training targets can see
            last = seq.first_timestamp + split.train[-1].target_index + 1
            sub = type(rt)(rt.assets, rt.dates[:last], rt.returns[:last])
            if last >= d.period:
                ordering = fit_ordering(sub, d.period)
    else:
        logger.warning("no samples: %d ADMs are too few for k=%d, u=%d, h=%d", n_adm, d.k, d.u, d.h)
    out.mkdir(parents=True, exist_ok=True)
    if seq is None:
        seq = ADMSequence(np.zeros((0, pt.n_assets, pt.n_assets)), list(rt.assets), d.measure,
                          d.n_lag)
    write_adm_archive(seq, out / "adm", extra={"dates": list(rt.dates)})
    ordering.save(out / "ordering.txt")
    tmp = out / "samples.json.tmp"
    tmp.write_text(json.dumps(index))
    tmp.replace(out / "samples.json")
    print(f"adms={n_adm} samples={len(samples)} train={len(index['train'])} "
          f"validation={len(index['validation'])} test={len(index['test'])}")


def cmd_train(cfg, out):
    seq, _, parts = _load_dataset(cfg, out)
    seed_everything(cfg.seed)
    model = _new_model(cfg, len(seq.assets))
    _install_ordering(model, out, seq.assets)
    Xtr, Ytr, _ = stack_samples(parts["train"])
    Xva, Yva, _ = stack_samples(parts["validation"])
    res = train(model, ((Xtr, Ytr), (Xva, Yva)), cfg.train, log_path=out / "train_log.csv")
    save_checkpoint(res.model, _checkpoint_path(cfg, out), cfg.variant,
                    extra={"seed": cfg.seed, "best_epoch": res.best_epoch,
                           "assets": list(seq.assets)})
    print(f"best_epoch={res.best_epoch} best_val={res.best_val!r}")


def cmd_eval(cfg, out):
    seq, _, parts = _load_dataset(cfg, out)
    test = parts["test"]
    pred = _predictions(cfg, out, seq, test, cfg.predictor)
    _, Y, P = stack_samples(test, dtype=np.float64)
    rep = evaluate(pred, Y, P)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(f"predictor={cfg.predictor}\nn_samples={len(test)}\n"
                                    f"mse={rep.mse!r}\ngain={rep.gain!r}\n")
    ts = [int(seq.first_timestamp + s.target_index) for s in test]
    _write_rows(out / "per_sample.csv", ["timestamp", "mse"],
                [(t, repr(float(m))) for t, m in zip(ts, rep.per_sample_mse)])
    write_adm_archive(ADMSequence(pred, list(seq.assets), seq.measure, seq.n_lag),
                      out / "predictions", predicted=True, timestamps=ts)
    print(f"mse={rep.mse!r} gain={rep.gain!r}")


def cmd_simulate(cfg, out):
    s = cfg.simulate
    if s.scenario == 1:
        spec = synth.scenario1_spec(s.n_assets, s.n_regimes, s.phases_per_regime, s.days,
                                    seed=s.factor_seed)
        sc = synth.build_scenario(spec, rng=cfg.seed)
    elif s.scenario == 2:
        seeds = np.random.SeedSequence(s.factor_seed).spawn(2)
        factors = [synth.random_factor(s.n_assets, np.random.default_rng(x)) for x in seeds]
        sc = synth.build_scenario(synth.scenario2_spec(factors, s.n_phases, s.days), rng=cfg.seed)
    else:
        if s.prices is None:
            raise UsageError("scenario 3 needs [simulate] prices")
        sc = synth.scenario3_from_prices(ingest_prices(s.prices, cfg.data.calendar_policy,
                                                       cfg.data.min_assets))
    d = out / "sim"
    d.mkdir(parents=True, exist_ok=True)
    write_prices(sc.prices, d / "prices.csv")
    _write_rows(d / "labels.csv", ["date", "phase", "regime"],
                zip(sc.returns.dates, sc.phase_labels.tolist(), sc.regime_labels.tolist()))
    print(f"days={len(sc.prices.dates)} assets={sc.prices.n_assets} "
          f"phases={len(sc.phase_regimes)}")


def cmd_expert_usage(cfg, out):
    seq, manifest, parts = _load_dataset(cfg, out)
    model, _ = load_checkpoint(_checkpoint_path(cfg, out))
    if getattr(model, "transform_block", None) is None:
        raise UsageError(f"variant {cfg.variant} has no MoE transform")
    labels_path = cfg.simulate.labels or out / "sim" / "labels.csv"
    if not Path(labels_path).exists():
        raise DataError(f"phase labels not found: {labels_path}")
    with open(labels_path, newline="") as fh:
        by_date = {r["date"]: int(r["phase"]) for r in csv.DictReader(fh)}
    dates = manifest.get("dates")
    if dates is None:
        raise DataError("ADM archive has no return dates; rebuild")
    missing = [dt for dt in dates if dt not in by_date]
    if missing:
        raise DataError(f"{len(missing)} return dates lack a phase label (first {missing[0]})")
    labels = np.array([by_date[dt] for dt in dates])
    samples = parts["train"] + parts["validation"] + parts["test"]
    phases = synth.sample_phase(samples, labels, seq.n_lag)
    X, _, _ = stack_samples(samples)
    groups = {}
    for i, ph in enumerate(phases):
        groups.setdefault(ph, []).append(i)
    windows = {ph: X[idx] for ph, idx in sorted(groups.items())}
    prof = synth.expert_usage(model, windows)
    synth.write_usage(prof, out / "usage.csv", out / "usage_long.csv")
    print(f"phases={len(prof.phases)} experts={prof.n_exp}")


def _rebalance_samples(test, step):
    return test[::step]


def cmd_portfolio(cfg, out):
    seq, manifest, parts = _load_dataset(cfg, out)
    if seq.measure != "correlation":
        raise UsageError("portfolio backtest needs correlation ADMs")
    pt = _load_prices(cfg, out)
    rt = log_returns(pt)
    if list(rt.assets) != list(seq.assets):
        raise DataError("price universe differs from the built ADM universe")
    h = cfg.data.h
    picks = [s for s in _rebalance_samples(parts["test"], h)
             if seq.first_timestamp + s.anchor + h < len(rt)]
    if not picks:
        raise DataError("no rebalance dates with a full holding window")
    ts = [int(seq.first_timestamp + s.anchor) for s in picks]
    true_cov = np.array([apps.realized_covariance(rt.returns, t, h) for t in ts])
    dates = [rt.dates[t] for t in ts]
    methods = ["previous", "ccm"]
    if _checkpoint_path(cfg, out).exists():
        methods.insert(0, "model")
    results, summary = [], {}
    for m in methods:
        pred = _predictions(cfg, out, seq, picks, m)
        res, summ = apps.portfolio_backtest(pred, true_cov, timestamps=dates, method=m,
                                            psd=cfg.portfolio_psd)
        if not results:
            results += [r for r in res if r.method == "Optimal"]
            summary["Optimal"] = summ["Optimal"]
        results += [r for r in res if r.method == m]
        summary[m] = summ[m]
    out.mkdir(parents=True, exist_ok=True)
    apps.write_portfolio_csv(results, out / "portfolio.csv")
    (out / "portfolio_summary.txt").write_text(
        "".join(f"{m}={v!r}\n" for m, v in summary.items()))
    print(" ".join(f"{m}={v:.6g}" for m, v in summary.items()))


def cmd_pairs(cfg, out):
    seq, _, parts = _load_dataset(cfg, out)
    pt = _load_prices(cfg, out)
    if list(pt.assets) != list(seq.assets):
        raise DataError("price universe differs from the built ADM universe")
    p = cfg.pairs
    pairs = p.pairs or [(seq.assets[0], seq.assets[1])]
    test = parts["test"]
    # ADM timestamp t ends at the close of price row t + 1
    price_idx = [seq.first_timestamp + s.anchor + 1 for s in test]
    eligible = [i for i, pi in enumerate(price_idx) if pi >= p.lookback]
    if not eligible:
        raise DataError(f"no test decision has {p.lookback} days of price history")
    first = price_idx[eligible[0]]
    chosen = [i for i in eligible if (price_idx[i] - first) % p.period == 0]
    picks = [test[i] for i in chosen]
    pred = _predictions(cfg, out, seq, picks, cfg.predictor)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for a, b in pairs:
        if a not in seq.assets or b not in seq.assets:
            raise DataError(f"pair {a}:{b} not in the asset universe")
        ia, ib = seq.assets.index(a), seq.assets.index(b)
        rep = apps.pair_trade_backtest(pt.prices[:, ia], pt.prices[:, ib], pred[:, ia, ib],
                                       theta=p.theta, capital=p.capital, period=p.period,
                                       start=first, lookback=p.lookback, dates=pt.dates,
                                       mode=p.mode)
        apps.write_trade_log(rep.trades, out / f"trades_{a}_{b}.csv")
        lines.append(f"[{a}:{b}]\n" + rep.summary() + f"trades={len(rep.trades)}\n")
    (out / "pairs_report.txt").write_text("\n".join(lines))
    print("".join(lines), end="")


COMMANDS = {
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "expert-usage": cmd_expert_usage,
    "portfolio": cmd_portfolio,
    "pairs": cmd_pairs,
}


def build_parser():
    parser = _Parser(prog="admf", description="ADM forecasting pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="INI run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output root (default $ADMF_OUT)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        COMMANDS[args.command](cfg, output_root(cfg))
    except (ConfigError, UsageError) as exc:
        print(f"admf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SplitError, CheckpointError, apps.InsufficientHistoryError,
            synth.FactorError, UndefinedGainError, FileNotFoundError) as exc:
        print(f"admf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, apps.ConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"admf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
