"""ConvLSTM forecaster plus the symmetrization and PSD post-processing blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class ForecasterConfig:
    layers: int = 2
    hidden_channels: int = 32
    kernel_size: int = 5
    use_transform: bool = False
    use_rearrangement: bool = False
    use_psd: bool = False
    renormalize_correlation: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")


@dataclass
class ConvLSTMState:
    hidden: torch.Tensor  # (B, hidden, w, h)
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError("hidden and cell state shapes differ")


class ConvLSTMCell(nn.Module):
    """Peephole ConvLSTM cell.

    Input-to-state and state-to-state maps are same-padded convolutions (one
    stacked conv for the four gates); the peepholes ``W_ci, W_cf, W_co`` are
    per-position Hadamard weights of shape ``(hidden, w, h)``.
    """

    def __init__(self, in_channels, hidden_channels, kernel_size, w, h):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        self.conv_x = nn.Conv2d(in_channels, 4 * hidden_channels, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(hidden_channels, 4 * hidden_channels, kernel_size, padding=pad,
                                bias=False)
        self.w_ci = nn.Parameter(torch.zeros(hidden_channels, w, h))
        self.w_cf = nn.Parameter(torch.zeros(hidden_channels, w, h))
        self.w_co = nn.Parameter(torch.zeros(hidden_channels, w, h))
        fan_in = (in_channels + hidden_channels) * kernel_size * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        for p in (self.conv_x.weight, self.conv_x.bias, self.conv_h.weight):
            nn.init.uniform_(p, -bound, bound)

    def init_state(self, x):
        z = x.new_zeros(x.shape[0], self.hidden_channels, *x.shape[-2:])
        return ConvLSTMState(z, z.clone())

    def forward(self, x, state):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h_prev, c_prev = state.hidden, state.cell
        zi, zf, zc, zo = (self.conv_x(x) + self.conv_h(h_prev)).chunk(4, dim=1)
        i = torch.sigmoid(zi + self.w_ci * c_prev)
        f = torch.sigmoid(zf + self.w_cf * c_prev)
        c = f * c_prev + i * torch.tanh(zc)
        o = torch.sigmoid(zo + self.w_co * c)
        return ConvLSTMState(o * torch.tanh(c), c)


def convlstm_cell_step(x, state, cell):
    return cell(x, state)


class ConvLSTMForecaster(nn.Module):
    """Stacked ConvLSTM over the k frames; a 1x1 conv maps the final top-layer
    hidden state to the raw prediction ``E`` of shape ``(B, c, w, h)``."""

    def __init__(self, c, w, h, cfg: ForecasterConfig | None = None):
        super().__init__()
        self.cfg = cfg or ForecasterConfig()
        self.shape = (c, w, h)
        chans = [c] + [self.cfg.hidden_channels] * self.cfg.layers
        self.cells = nn.ModuleList(
            ConvLSTMCell(chans[i], chans[i + 1], self.cfg.kernel_size, w, h)
            for i in range(self.cfg.layers))
        self.head = nn.Conv2d(self.cfg.hidden_channels, c, 1)

    def forward(self, window):
        if tuple(window.shape[2:]) != self.shape:
            raise ValueError(f"frame shape {tuple(window.shape[2:])} != configured {self.shape}")
        states = [cell.init_state(window[:, 0]) for cell in self.cells]
        for step in range(window.shape[1]):
            x = window[:, step]
            for li, cell in enumerate(self.cells):
                states[li] = cell(x, states[li])
                x = states[li].hidden
        return self.head(states[-1].hidden)


def forecast(window, forecaster):
    return forecaster(window)


def symmetrize(E):
    """Mirror the upper triangle (diagonal included) onto the lower one.

    Works for NumPy arrays or tensors with the matrix in the last two axes.
    """
    if E.shape[-1] != E.shape[-2]:
        raise ValueError(f"non-square matrix of shape {tuple(E.shape)}")
    if isinstance(E, torch.Tensor):
        upper = torch.triu(E)
        return upper + upper.transpose(-1, -2) - torch.diag_embed(torch.diagonal(E, dim1=-2, dim2=-1))
    E = np.asarray(E)
    upper = np.triu(E)
    out = upper + np.swapaxes(upper, -1, -2)
    n = E.shape[-1]
    out[..., np.arange(n), np.arange(n)] = E[..., np.arange(n), np.arange(n)]
    return out


def enforce_psd(M, renormalize_correlation=False, sym_tol=1e-9):
    """Zero out negative eigenvalues: ``P diag(max(L, 0)) P^T``.

    Accepts one matrix or a stack. With ``renormalize_correlation`` the result
    is rescaled to unit diagonal, ``D^-1/2 M D^-1/2``.
    """
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("non-finite entries; cannot eigendecompose")
    if np.max(np.abs(M - np.swapaxes(M, -1, -2)), initial=0.0) > sym_tol:
        raise ValueError("enforce_psd needs a symmetric matrix")
    lam, P = np.linalg.eigh(M)
    out = (P * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(P, -1, -2)
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    if renormalize_correlation:
        d = np.sqrt(np.clip(np.diagonal(out, axis1=-2, axis2=-1), 1e-300, None))
        out = out / (d[..., :, None] * d[..., None, :])
    return out
