"""Prices, log returns, ADM sequences and supervised windows.

An ADM (asset dependency matrix) at day ``t`` is the sample covariance or
correlation of the log returns in the trailing window ``(t - n_lag, t]``.
Day indices refer to rows of the :class:`ReturnTable`. ADM index ``i`` in an
:class:`ADMSequence` has timestamp ``t = i + n_lag - 1``, so index gaps and
day gaps coincide.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from admf import _core

logger = logging.getLogger(__name__)

MEASURES = ("correlation", "covariance")


class DataError(ValueError):
    """Malformed or unusable input data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyUniverseError(DataError):
    pass


class DegenerateWindowError(DataError):
    """A zero-variance asset makes the correlation undefined."""

    def __init__(self, asset, t):
        super().__init__(f"asset {asset!r} has zero return variance in the window ending at t={t}")
        self.asset = asset
        self.t = t


class SplitError(ValueError):
    pass


@dataclass
class PriceTable:
    assets: list
    dates: list
    prices: np.ndarray  # (n_dates, n_assets)

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=np.float64)
        if self.prices.shape != (len(self.dates), len(self.assets)):
            raise DataError(f"price matrix shape {self.prices.shape} does not match "
                            f"{len(self.dates)} dates x {len(self.assets)} assets")
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            raise DataError("prices must be finite and positive")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError("dates must be strictly increasing")

    @property
    def n_assets(self):
        return len(self.assets)

    def select(self, assets):
        idx = [self.assets.index(a) for a in assets]
        return PriceTable(list(assets), list(self.dates), self.prices[:, idx])


@dataclass
class ReturnTable:
    assets: list
    dates: list
    returns: np.ndarray  # (n_dates, n_assets)

    def __len__(self):
        return self.returns.shape[0]


@dataclass
class ADM:
    timestamp: int
    measure: str
    matrix: np.ndarray
    ordering: list
    n_lag: int
    predicted: bool = False


@dataclass
class ADMSequence:
    """Stacked ADMs for consecutive days; ``matrices[i]`` ends at day ``i + n_lag - 1``."""

    matrices: np.ndarray  # (N, n, n)
    assets: list
    measure: str
    n_lag: int
    first_timestamp: int = None

    def __post_init__(self):
        if self.first_timestamp is None:
            self.first_timestamp = self.n_lag - 1

    def __len__(self):
        return self.matrices.shape[0]

    def __getitem__(self, i):
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return ADM(self.first_timestamp + i, self.measure, self.matrices[i],
                   list(self.assets), self.n_lag)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def timestamps(self):
        return self.first_timestamp + np.arange(len(self))


@dataclass
class ADMSample:
    """One supervised example, referencing ADMs by sequence index."""

    sequence: ADMSequence = field(repr=False)
    anchor: int
    k: int
    u: int
    h: int

    @property
    def input_indices(self):
        return [self.anchor - (self.k - d) * self.u for d in range(1, self.k + 1)]

    @property
    def target_index(self):
        return self.anchor + self.h

    @property
    def inputs(self):
        return self.sequence.matrices[self.input_indices]

    @property
    def target(self):
        return self.sequence.matrices[self.target_index]

    @property
    def previous(self):
        return self.sequence.matrices[self.anchor]


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    split_fractions: tuple

    def __post_init__(self):
        parts = [self.train, self.validation, self.test]
        if any(not p for p in parts):
            raise SplitError("every split must be non-empty")
        if not (max(s.anchor for s in self.train) < min(s.anchor for s in self.validation)
                and max(s.anchor for s in self.validation) < min(s.anchor for s in self.test)):
            raise SplitError("splits are not chronological")


def ingest_prices(path, calendar_policy="strict", min_assets=2):
    """Read a long-format ``date,asset,close`` CSV into a :class:`PriceTable`.

    Under ``strict`` any asset missing a date present for some other asset is
    dropped; under ``intersect`` the calendar shrinks to the dates every asset
    has. Dates are ISO-8601 strings and sort lexicographically.
    """
    if calendar_policy not in ("strict", "intersect"):
        raise ValueError(f"unknown calendar policy {calendar_policy!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"price file not found: {path}")
    series = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["date", "asset", "close"]:
            raise DataError("expected header 'date,asset,close'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"expected 3 fields, got {len(row)}", line=lineno)
            date, asset, close = (c.strip() for c in row)
            if not date or not asset:
                raise DataError("empty date or asset", line=lineno)
            try:
                value = float(close)
            except ValueError:
                raise DataError(f"unparseable close {close!r}", line=lineno) from None
            if not math.isfinite(value) or value <= 0:
                raise DataError(f"close must be positive, got {close!r}", line=lineno)
            per_asset = series.setdefault(asset, {})
            if date in per_asset:
                raise DataError(f"duplicate row for ({date}, {asset})", line=lineno)
            per_asset[date] = value

    if not series:
        raise EmptyUniverseError("no price rows")
    all_dates = sorted(set().union(*(s.keys() for s in series.values())))
    if calendar_policy == "strict":
        assets = []
        for a in sorted(series):
            if len(series[a]) == len(all_dates):
                assets.append(a)
            else:
                logger.warning("dropping asset %s: %d of %d dates missing", a,
                               len(all_dates) - len(series[a]), len(all_dates))
        dates = all_dates
    else:
        assets = sorted(series)
        common = set(all_dates)
        for a in assets:
            common &= series[a].keys()
        dates = sorted(common)
    if len(assets) < min_assets or not dates:
        raise EmptyUniverseError(f"{len(assets)} assets survive ingest; need at least {min_assets}")
    prices = np.array([[series[a][d] for a in assets] for d in dates])
    return PriceTable(assets, dates, prices)


def write_prices(pt, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "asset", "close"])
        for i, d in enumerate(pt.dates):
            for j, a in enumerate(pt.assets):
                w.writerow([d, a, repr(float(pt.prices[i, j]))])


def log_returns(pt):
    r = np.diff(np.log(pt.prices), axis=0)
    return ReturnTable(list(pt.assets), list(pt.dates[1:]), r)


def _cov_to_corr(cov, assets, t_of, degenerate_policy):
    """Correlation from stacked covariances ``(N, n, n)``."""
    var = np.diagonal(cov, axis1=1, axis2=2)
    flat = var <= 0.0
    if flat.any():
        if degenerate_policy != "zero":
            w, a = np.argwhere(flat)[0]
            raise DegenerateWindowError(assets[a], t_of(w))
    sd = np.sqrt(np.where(flat, 1.0, var))
    corr = cov / (sd[:, :, None] * sd[:, None, :])
    corr = np.where(flat[:, :, None] | flat[:, None, :], 0.0, corr)
    corr = np.clip(corr, -1.0, 1.0)
    n = cov.shape[1]
    corr[:, np.arange(n), np.arange(n)] = 1.0
    return corr


def compute_adm(rt, t, n_lag, measure="correlation", degenerate_policy="error"):
    """ADM over the return rows ``(t - n_lag, t]``."""
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    if n_lag < 2:
        raise ValueError("n_lag must be at least 2")
    if not n_lag - 1 <= t < len(rt):
        raise ValueError(f"t={t} needs a full window of {n_lag} returns inside {len(rt)} rows")
    cov = _core.rolling_cov(rt.returns[t - n_lag + 1:t + 1], n_lag)
    if measure == "correlation":
        cov = _cov_to_corr(cov, rt.assets, lambda w: t, degenerate_policy)
    return ADM(t, measure, cov[0], list(rt.assets), n_lag)


def build_adm_sequence(rt, n_lag, measure="correlation", degenerate_policy="error"):
    if measure not in MEASURES:
        raise ValueError(f"unknown measure {measure!r}")
    if n_lag < 2:
        raise ValueError("n_lag must be at least 2")
    if len(rt) < n_lag:
        raise DataError(f"{len(rt)} returns are fewer than n_lag={n_lag}")
    mats = _core.rolling_cov(rt.returns, n_lag)
    if measure == "correlation":
        mats = _cov_to_corr(mats, rt.assets, lambda w: w + n_lag - 1, degenerate_policy)
    return ADMSequence(mats, list(rt.assets), measure, n_lag)


def n_samples(n_adm, k, u, h):
    return max(0, n_adm - ((k - 1) * u + h))


def window_samples(adms, k, u, h):
    """Every (k inputs spaced u apart, target h ahead) window, ordered by anchor."""
    if min(k, u, h) < 1:
        raise ValueError("k, u and h must be >= 1")
    first = (k - 1) * u
    return [ADMSample(adms, a, k, u, h) for a in range(first, len(adms) - h)]


def split_samples(samples, fractions=(0.8, 0.1, 0.1)):
    """Chronological split; train gets ``floor(f_train * N)``, the rest is shared
    between validation and test in proportion (validation rounded down)."""
    f_tr, f_va, f_te = fractions
    if min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be positive and sum to 1, got {fractions}")
    ordered = sorted(samples, key=lambda s: s.anchor)
    n = len(ordered)
    n_tr = int(math.floor(f_tr * n + 1e-9))
    n_va = int(math.floor((n - n_tr) * f_va / (f_va + f_te) + 1e-9))
    return DatasetSplit(ordered[:n_tr], ordered[n_tr:n_tr + n_va], ordered[n_tr + n_va:],
                        tuple(fractions))


def stack_samples(samples, dtype=np.float32):
    """``(X, Y, P)``: inputs ``(N, k, 1, n, n)``, targets and previous ADMs ``(N, n, n)``."""
    if not samples:
        raise ValueError("no samples to stack")
    seq = samples[0].sequence
    inp = np.array([s.input_indices for s in samples])
    tgt = np.array([s.target_index for s in samples])
    anc = np.array([s.anchor for s in samples])
    X = seq.matrices[inp][:, :, None].astype(dtype)
    return X, seq.matrices[tgt].astype(dtype), seq.matrices[anc].astype(dtype)


# ---------------------------------------------------------------- archive IO

MANIFEST = "manifest.json"


def write_adm_archive(seq, directory, predicted=False, timestamps=None, extra=None):
    """Write ``adm_<t>.csv`` files plus ``manifest.json``; replaces the directory atomically.

    Manifest keys: ``format`` (``"admf-archive"``), ``version``, ``measure``,
    ``n_lag``, ``ordering`` (asset ids, row/column order), ``timestamps``,
    ``predicted``, plus anything in ``extra``.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".adm-", dir=directory.parent))
    try:
        ts = list(seq.timestamps if timestamps is None else timestamps)
        for t, m in zip(ts, seq.matrices):
            np.savetxt(tmp / f"adm_{int(t)}.csv", m, delimiter=",", fmt="%.17g")
        manifest = {"format": "admf-archive", "version": 1, "measure": seq.measure,
                    "n_lag": seq.n_lag, "ordering": list(seq.assets),
                    "timestamps": [int(t) for t in ts], "predicted": bool(predicted)}
        manifest.update(extra or {})
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1))
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def read_adm_archive(directory):
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    ts = manifest["timestamps"]
    mats = np.array([np.loadtxt(directory / f"adm_{t}.csv", delimiter=",", ndmin=2) for t in ts])
    seq = ADMSequence(mats, manifest["ordering"], manifest["measure"], manifest["n_lag"],
                      first_timestamp=ts[0] if ts else None)
    return seq, manifest
