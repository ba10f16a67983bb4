"""Run configuration: one INI file with sectioned keys.

Relative paths are resolved against the config file's directory. Every
embedded config is constructed (and so validated) in :func:`load_config`,
before any command writes a file.

Example::

    [run]
    seed = 0

    [data]
    prices = prices.csv
    n_lag = 42
    k = 10
    u = 21
    h = 21

    [model]
    variant = PT-ADNN

    [train]
    max_epochs = 200
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from admf.data import MEASURES
from admf.forecaster import ForecasterConfig
from admf.models import VARIANTS
from admf.training import TrainConfig
from admf.transform import TransformConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSettings:
    prices: Path | None = None
    measure: str = "correlation"
    n_lag: int = 42
    k: int = 10
    u: int = 21
    h: int = 21
    split: tuple = (0.8, 0.1, 0.1)
    calendar_policy: str = "strict"
    min_assets: int = 2
    degenerate_policy: str = "error"
    period: int = 21  # block length for the rearrangement's monthly means

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ConfigError(f"data.measure must be one of {MEASURES}")
        if self.n_lag < 2 or min(self.k, self.u, self.h, self.period) < 1:
            raise ConfigError("data: need n_lag >= 2 and k, u, h, period >= 1")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("data.split must be three positive fractions summing to 1")
        if self.calendar_policy not in ("strict", "intersect"):
            raise ConfigError("data.calendar_policy must be strict or intersect")
        if self.degenerate_policy not in ("error", "zero"):
            raise ConfigError("data.degenerate_policy must be error or zero")


@dataclass
class SimulateSettings:
    scenario: int = 1
    n_assets: int = 32
    n_regimes: int = 5
    phases_per_regime: int = 3
    n_phases: int = 10
    days: int = 300
    factor_seed: int = 0
    prices: Path | None = None  # scenario 3 input
    labels: Path | None = None  # phase labels read by expert-usage

    def __post_init__(self):
        if self.scenario not in (1, 2, 3):
            raise ConfigError("simulate.scenario must be 1, 2 or 3")
        if min(self.n_assets, self.n_regimes, self.phases_per_regime, self.days) < 1:
            raise ConfigError("simulate: sizes must be positive")
        if self.n_assets < 2:
            raise ConfigError("simulate.n_assets must be >= 2")
        if self.n_phases < 2:
            raise ConfigError("simulate.n_phases must be >= 2")


@dataclass
class PairsSettings:
    theta: float = 0.7
    capital: float = 1.0
    period: int = 21
    lookback: int = 252
    mode: str = "hold"
    pairs: list = field(default_factory=list)  # [(asset_a, asset_b)]

    def __post_init__(self):
        if not self.capital > 0:
            raise ConfigError("pairs.capital must be positive")
        if self.period < 1 or self.lookback < 1:
            raise ConfigError("pairs.period and pairs.lookback must be >= 1")
        if self.mode not in ("hold", "rebalance"):
            raise ConfigError("pairs.mode must be hold or rebalance")


@dataclass
class RunConfig:
    path: Path
    seed: int = 0
    out: Path | None = None
    variant: str = "PT-ADNN"
    checkpoint: Path | None = None
    predictor: str = "model"
    data: DataSettings = field(default_factory=DataSettings)
    transform: TransformConfig = field(default_factory=TransformConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    pairs: PairsSettings = field(default_factory=PairsSettings)
    portfolio_psd: bool = True


PREDICTORS = ("model", "previous", "truth", "ccm")


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _typed(section, key, raw, kind):
    try:
        if kind is bool:
            return _bool(raw)
        if kind == "floats":
            return tuple(float(x) for x in raw.split(","))
        if kind == "ints":
            return tuple(int(x) for x in raw.split(","))
        return kind(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _take(cp, section, schema, base):
    """Typed values of ``section`` restricted to ``schema``; unknown keys are errors."""
    out = {}
    if not cp.has_section(section):
        return out
    for key, raw in cp.items(section):
        if key not in schema:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kind = schema[key]
        if kind is Path:
            p = Path(os.path.expandvars(raw))
            out[key] = p if p.is_absolute() else base / p
        else:
            out[key] = _typed(section, key, raw, kind)
    return out


DATA_KEYS = {"prices": Path, "measure": str, "n_lag": int, "k": int, "u": int, "h": int,
             "split": "floats", "calendar_policy": str, "min_assets": int,
             "degenerate_policy": str, "period": int}
MODEL_KEYS = {"variant": str, "layers": int, "hidden_channels": int, "kernel_size": int,
              "use_psd": bool, "renormalize_correlation": bool, "n_exp": int, "top_k": int,
              "expert_hidden": int, "conv_channels": "ints", "noise_enabled": bool,
              "checkpoint": Path}
TRAIN_KEYS = {"batch_size": int, "init_lr": float, "warmup_epochs": int,
              "plateau_patience": int, "lr_decay_factor": float, "grad_clip": float,
              "max_epochs": int, "augment_permutations": bool}
SIM_KEYS = {"scenario": int, "n_assets": int, "n_regimes": int, "phases_per_regime": int,
            "n_phases": int, "days": int, "factor_seed": int, "prices": Path, "labels": Path}
PAIRS_KEYS = {"theta": float, "capital": float, "period": int, "lookback": int, "mode": str,
              "pairs": str}
RUN_KEYS = {"seed": int, "out": Path}
EVAL_KEYS = {"predictor": str}
PORTFOLIO_KEYS = {"psd": bool}
SECTIONS = {"run", "data", "model", "train", "simulate", "pairs", "eval", "portfolio"}


def _pairs(raw):
    pairs = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        a, sep, b = item.partition(":")
        if not sep or not a or not b:
            raise ConfigError(f"[pairs] pairs: expected 'A:B', got {item!r}")
        pairs.append((a.strip(), b.strip()))
    return pairs


def load_config(path, seed=None, out=None):
    """Parse and validate ``path``; ``seed`` and ``out`` override the file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    extra = set(cp.sections()) - SECTIONS
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    base = path.parent.resolve()
    run = _take(cp, "run", RUN_KEYS, base)
    data = _take(cp, "data", DATA_KEYS, base)
    model = _take(cp, "model", MODEL_KEYS, base)
    train = _take(cp, "train", TRAIN_KEYS, base)
    sim = _take(cp, "simulate", SIM_KEYS, base)
    pairs = _take(cp, "pairs", PAIRS_KEYS, base)
    ev = _take(cp, "eval", EVAL_KEYS, base)
    port = _take(cp, "portfolio", PORTFOLIO_KEYS, base)

    variant = model.pop("variant", "PT-ADNN")
    if variant not in VARIANTS and variant != "LSTM":
        raise ConfigError(f"[model] variant must be one of {sorted(VARIANTS) + ['LSTM']}")
    checkpoint = model.pop("checkpoint", None)
    tkeys = ("n_exp", "top_k", "expert_hidden", "conv_channels", "noise_enabled")
    tcfg = {k: model.pop(k) for k in tkeys if k in model}
    if "pairs" in pairs:
        pairs["pairs"] = _pairs(pairs["pairs"])
    predictor = ev.get("predictor", "model")
    if predictor not in PREDICTORS:
        raise ConfigError(f"[eval] predictor must be one of {PREDICTORS}")
    seed = run.get("seed", 0) if seed is None else int(seed)
    try:
        cfg = RunConfig(
            path=path,
            seed=seed,
            out=Path(out) if out is not None else run.get("out"),
            variant=variant,
            checkpoint=checkpoint,
            predictor=predictor,
            data=DataSettings(**data),
            transform=TransformConfig(**tcfg),
            forecaster=ForecasterConfig(**model),
            train=TrainConfig(seed=seed, **train),
            simulate=SimulateSettings(**sim),
            pairs=PairsSettings(**pairs),
            portfolio_psd=port.get("psd", True),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def output_root(cfg):
    """``--out`` or ``[run] out``, else ``$ADMF_OUT``, else ``./admf_out``."""
    if cfg.out is not None:
        return Path(cfg.out)
    return Path(os.environ.get("ADMF_OUT", "admf_out"))
