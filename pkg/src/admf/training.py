"""Loss, training loop, metrics and the non-neural baselines."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from admf.data import ADM, DatasetSplit, stack_samples
from admf.forecaster import enforce_psd, symmetrize

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class UndefinedGainError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    init_lr: float = 5e-4
    warmup_epochs: int = 5
    plateau_patience: int = 10
    lr_decay_factor: float = 0.5
    grad_clip: float = 10.0
    max_epochs: int = 200
    seed: int = 0
    optimizer: str = "adam"
    augment_permutations: bool = False

    def __post_init__(self):
        for name in ("batch_size", "init_lr", "warmup_epochs", "plateau_patience",
                     "grad_clip", "max_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list
    best_epoch: int
    best_val: float


@dataclass
class ForecastReport:
    mse: float
    gain: float
    per_sample_mse: list = field(default_factory=list)


def upper_triangle_mse_loss(E, target):
    """Sum of squared upper-triangle (diagonal included) errors, averaged over the batch."""
    if E.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(E.shape)} vs {tuple(target.shape)}")
    n = E.shape[-1]
    iu = torch.triu_indices(n, n)
    diff = (E - target)[..., iu[0], iu[1]]
    per = diff.pow(2).reshape(E.shape[0], -1).sum(dim=1)
    return per.mean()


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def _as_arrays(split):
    if isinstance(split, DatasetSplit):
        Xtr, Ytr, _ = stack_samples(split.train)
        Xva, Yva, _ = stack_samples(split.validation)
        return (Xtr, Ytr), (Xva, Yva)
    return split


def permute_assets(X, Y, perms):
    """Relabel assets per sample: rows and columns of every frame and the target."""
    B, k, c, n, _ = X.shape
    pr = perms[:, None, None, :, None].expand(B, k, c, n, n)
    pc = perms[:, None, None, None, :].expand(B, k, c, n, n)
    X = torch.take_along_dim(torch.take_along_dim(X, pr, dim=3), pc, dim=4)
    Y = torch.take_along_dim(Y, perms[:, :, None].expand(B, n, n), dim=1)
    Y = torch.take_along_dim(Y, perms[:, None, :].expand(B, n, n), dim=2)
    return X, Y


def warmup_lr(cfg, epoch):
    """Learning rate for 1-based ``epoch`` inside the warmup ramp."""
    return cfg.init_lr * min(epoch, cfg.warmup_epochs) / cfg.warmup_epochs


@torch.no_grad()
def _eval_loss(model, X, Y, batch):
    model.eval()
    total = 0.0
    for s in range(0, X.shape[0], batch):
        E = model(X[s:s + batch])
        total += float(upper_triangle_mse_loss(E[:, 0], Y[s:s + batch])) * E.shape[0]
    return total / X.shape[0]


def train(model, split, cfg: TrainConfig, log_path=None, on_step=None):
    """Adam with warmup, plateau decay and global-norm clipping.

    ``split`` is a :class:`DatasetSplit` or ``((X_train, Y_train), (X_val, Y_val))``
    with ``X`` shaped ``(N, k, 1, n, n)`` and ``Y`` shaped ``(N, n, n)``. The
    returned model carries the best-validation weights. ``on_step(model, batch)``
    is called after clipping and before the optimizer update.
    """
    (Xtr, Ytr), (Xva, Yva) = _as_arrays(split)
    if len(Xtr) == 0 or len(Xva) == 0:
        raise ValueError("training and validation data must be non-empty")
    dtype = next(model.parameters()).dtype
    Xtr, Ytr, Xva, Yva = (torch.as_tensor(np.asarray(a), dtype=dtype) for a in (Xtr, Ytr, Xva, Yva))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    if hasattr(model, "set_generator"):
        model.set_generator(gen)
    opt = torch.optim.Adam(model.parameters(), lr=warmup_lr(cfg, 1))
    lr = warmup_lr(cfg, 1)
    best_val, best_epoch, best_state = math.inf, 0, copy.deepcopy(model.state_dict())
    plateau_best, bad_epochs = math.inf, 0
    log = []
    for epoch in range(1, cfg.max_epochs + 1):
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = rng.permutation(Xtr.shape[0])
        total = 0.0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            xb, yb = Xtr[idx], Ytr[idx]
            if cfg.augment_permutations:
                perms = torch.as_tensor(rng.permuted(np.tile(np.arange(xb.shape[-1]), (len(idx), 1)),
                                                     axis=1))
                xb, yb = permute_assets(xb, yb, perms)
            opt.zero_grad()
            loss = upper_triangle_mse_loss(model(xb)[:, 0], yb)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            if on_step is not None:
                on_step(model, b)
            opt.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / len(order)
        val_loss = _eval_loss(model, Xva, Yva, max(cfg.batch_size, 256))
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        logger.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        if epoch < cfg.warmup_epochs:
            lr = warmup_lr(cfg, epoch + 1)
        else:
            if val_loss < plateau_best:
                plateau_best, bad_epochs = val_loss, 0
            else:
                bad_epochs += 1
                if bad_epochs > cfg.plateau_patience:
                    lr *= cfg.lr_decay_factor
                    bad_epochs = 0
    model.load_state_dict(best_state)
    if log_path is not None:
        write_training_log(log, log_path)
    return TrainResult(model, log, best_epoch, best_val)


def write_training_log(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in log:
            w.writerow([row["epoch"], repr(float(row["train_loss"])),
                        repr(float(row["val_loss"])), repr(float(row["lr"]))])


@torch.no_grad()
def predict(model, X, batch=256, psd=False, renormalize_correlation=False):
    """Symmetrized predictions ``(N, n, n)`` as float64 NumPy; optional PSD repair."""
    model.eval()
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.asarray(X), dtype=dtype)
    out = [symmetrize(model(X[s:s + batch])[:, 0]).double().numpy()
           for s in range(0, X.shape[0], batch)]
    P = np.concatenate(out)
    if psd:
        P = enforce_psd(P, renormalize_correlation=renormalize_correlation)
    return P


def _upper(M):
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[-1]
    iu = np.triu_indices(n)
    return M[..., iu[0], iu[1]]


def evaluate(predictions, targets, previous):
    """MSE (mean over samples of the mean squared upper-triangle error) and
    Gain = 1 - SSE(prediction) / SSE(previous), sums over all upper triangles."""
    P, T, R = (np.asarray([getattr(m, "matrix", m) for m in a], dtype=np.float64)
               for a in (predictions, targets, previous))
    if not (len(P) == len(T) == len(R)) or len(P) == 0:
        raise ValueError("predictions, targets and previous must have equal nonzero length")
    if not (P.shape == T.shape == R.shape):
        raise ValueError("matrix shapes differ")
    err = (_upper(T) - _upper(P)) ** 2
    ref = (_upper(T) - _upper(R)) ** 2
    denom = ref.sum()
    if denom == 0:
        raise UndefinedGainError("targets equal the previous ADMs everywhere; gain undefined")
    per = err.mean(axis=1)
    return ForecastReport(float(per.mean()), float(1.0 - err.sum() / denom), per.tolist())


def baseline_previous(sample):
    """The ADM at the sample's anchor (the last input frame)."""
    seq = sample.sequence
    return seq[sample.anchor]


def baseline_ccm(history, window_days=5 * 252):
    """Constant-correlation forecast from the ADMs in the trailing ``window_days``.

    Off-diagonals equal the grand mean of every off-diagonal entry in the window.
    """
    history = list(history)
    if not history:
        raise ValueError("CCM needs a nonempty history")
    t = history[-1].timestamp
    window = [a for a in history if a.timestamp > t - window_days]
    if not window:
        raise ValueError("empty CCM window")
    if window[0].measure != "correlation":
        raise ValueError("CCM applies to correlation ADMs")
    n = window[0].matrix.shape[0]
    off = ~np.eye(n, dtype=bool)
    rho = float(np.mean([a.matrix[off].mean() for a in window]))
    out = np.full((n, n), rho)
    np.fill_diagonal(out, 1.0)
    return ADM(t, "correlation", out, list(window[0].ordering), window[0].n_lag, predicted=True)


def ccm_predictions(seq, samples, window_days=5 * 252):
    """Vectorized :func:`baseline_ccm` for many samples of one sequence."""
    n = seq.matrices.shape[1]
    off = ~np.eye(n, dtype=bool)
    means = seq.matrices[:, off].mean(axis=1)
    csum = np.concatenate([[0.0], np.cumsum(means)])
    out = np.empty((len(samples), n, n))
    for i, s in enumerate(samples):
        lo = max(0, s.anchor - window_days + 1)
        out[i] = (csum[s.anchor + 1] - csum[lo]) / (s.anchor + 1 - lo)
        np.fill_diagonal(out[i], 1.0)
    return out
