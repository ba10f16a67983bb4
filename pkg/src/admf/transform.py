"""Dynamic quadratic ADM transform driven by sparse mixtures of experts.

A window of ADMs ``M`` (shape ``k x c x w x h``) is mapped entrywise to
``alpha * M * M + beta * M + gamma``. The three coefficient tensors come from
three noisy top-k gated MoE blocks fed by a small 3D-convolutional feature
extractor over the whole window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class TransformConfig:
    n_exp: int = 8
    top_k: int = 4
    expert_hidden: int | None = None  # None -> 2 * feature length
    conv_channels: tuple = (8, 4)
    noise_enabled: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if not 1 <= self.top_k <= self.n_exp:
            raise ValueError(f"need 1 <= top_k <= n_exp, got top_k={self.top_k}, n_exp={self.n_exp}")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ValueError("conv_channels must be two positive widths")
        if self.expert_hidden is not None and self.expert_hidden < 1:
            raise ValueError("expert_hidden must be >= 1")


@dataclass
class CoefficientTensors:
    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor

    def __post_init__(self):
        if not (self.alpha.shape == self.beta.shape == self.gamma.shape):
            raise ValueError("coefficient tensors must share one shape")


@dataclass
class GateDecision:
    weights: torch.Tensor   # (B, n_exp), zero outside `selected`
    selected: torch.Tensor  # (B, top_k) expert indices, best first


# feature extractor geometry: kernel 3, stride 2, padding 1 on every axis
KERNEL, STRIDE, PADDING = 3, 2, 1


def conv_out_len(size, kernel=KERNEL, stride=STRIDE, padding=PADDING):
    return (size + 2 * padding - kernel) // stride + 1


def feature_length(k, w, h, conv_channels=(8, 4)):
    """Length of the flattened feature vector for a ``k x c x w x h`` window.

    Each Conv3D maps every axis ``L -> floor((L + 2 - 3) / 2) + 1``.
    """
    dims = (k, w, h)
    for _ in range(2):
        dims = tuple(conv_out_len(d) for d in dims)
    return conv_channels[1] * dims[0] * dims[1] * dims[2]


def _fan_in_uniform_(weight, bias, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)
    if bias is not None:
        nn.init.uniform_(bias, -bound, bound)


class FeatureExtractor(nn.Module):
    """Two stride-2 Conv3D layers with a ReLU between them (none after the
    second, so features keep their sign); the window's k axis is the depth axis."""

    def __init__(self, k, c, w, h, conv_channels=(8, 4)):
        super().__init__()
        c1, c2 = conv_channels
        self.shape = (k, c, w, h)
        self.conv1 = nn.Conv3d(c, c1, KERNEL, stride=STRIDE, padding=PADDING)
        self.conv2 = nn.Conv3d(c1, c2, KERNEL, stride=STRIDE, padding=PADDING)
        for conv in (self.conv1, self.conv2):
            _fan_in_uniform_(conv.weight, conv.bias, conv.weight[0].numel())
        self.out_features = feature_length(k, w, h, conv_channels)

    def forward(self, window):
        # window: (B, k, c, w, h) -> Conv3d wants (B, c, k, w, h)
        if tuple(window.shape[1:]) != self.shape:
            raise ValueError(f"window shape {tuple(window.shape[1:])} != configured {self.shape}")
        x = window.transpose(1, 2)
        return self.conv2(F.relu(self.conv1(x))).flatten(1)


def extract_features(window, extractor):
    return extractor(window)


def noisy_topk_gate(phi, w_gate, w_noise, top_k, noise=False, generator=None):
    """Sparse softmax gate over the top_k (noisy) logits.

    Ties break toward the lower expert index (stable descending sort).
    """
    logits = phi @ w_gate
    if noise:
        eps = torch.randn(logits.shape, generator=generator, dtype=logits.dtype,
                          device=logits.device)
        logits = logits + eps * F.softplus(phi @ w_noise)
    order = torch.sort(logits, dim=1, descending=True, stable=True).indices
    selected = order[:, :top_k]
    top = torch.gather(logits, 1, selected)
    weights = torch.zeros_like(logits).scatter(1, selected, torch.softmax(top, dim=1))
    return GateDecision(weights, selected)


class Expert(nn.Module):
    """phi -> hidden (ReLU) -> c*w*h, linear output."""

    def __init__(self, d_in, d_hidden, d_out):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        _fan_in_uniform_(self.fc1.weight, self.fc1.bias, d_in)
        _fan_in_uniform_(self.fc2.weight, self.fc2.bias, d_hidden)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class MoEBlock(nn.Module):
    """Noisy top-k gated mixture emitting one ``1 x c x w x h`` coefficient tensor.

    Only experts selected for at least one batch row are evaluated, and only on
    those rows. ``last_gate`` keeps the most recent :class:`GateDecision`.
    """

    def __init__(self, d_in, out_shape, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        self.out_shape = tuple(out_shape)
        d_out = math.prod(self.out_shape)
        hidden = cfg.expert_hidden or 2 * d_in
        self.w_gate = nn.Parameter(torch.zeros(d_in, cfg.n_exp))
        self.w_noise = nn.Parameter(torch.zeros(d_in, cfg.n_exp))
        self.experts = nn.ModuleList(Expert(d_in, hidden, d_out) for _ in range(cfg.n_exp))
        self.generator = None
        self.last_gate = None

    def gate(self, phi):
        noise = self.cfg.noise_enabled and self.training
        return noisy_topk_gate(phi, self.w_gate, self.w_noise, self.cfg.top_k, noise,
                               self.generator)

    def forward(self, phi):
        decision = self.gate(phi)
        self.last_gate = decision
        out = phi.new_zeros(phi.shape[0], math.prod(self.out_shape))
        for e, expert in enumerate(self.experts):
            rows = (decision.selected == e).any(dim=1).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            y = expert(phi[rows]) * decision.weights[rows, e:e + 1]
            out = out.index_add(0, rows, y)
        return out.view(phi.shape[0], 1, *self.out_shape)


def moe_forward(phi, block):
    return block(phi)


def quadratic_transform(window, coeffs):
    """``alpha * M**2 + beta * M + gamma`` on every frame; coefficients broadcast over k."""
    a, b, g = coeffs.alpha, coeffs.beta, coeffs.gamma
    if a.shape[-3:] != window.shape[-3:]:
        raise ValueError(f"coefficient shape {tuple(a.shape)} does not fit window {tuple(window.shape)}")
    return a * window * window + b * window + g


class QuadraticMoETransform(nn.Module):
    """Feature extractor plus quadratic/linear/constant MoE blocks."""

    def __init__(self, k, c, w, h, cfg: TransformConfig | None = None):
        super().__init__()
        self.cfg = cfg or TransformConfig()
        self.features = FeatureExtractor(k, c, w, h, self.cfg.conv_channels)
        d = self.features.out_features
        self.quad = MoEBlock(d, (c, w, h), self.cfg)
        self.linear = MoEBlock(d, (c, w, h), self.cfg)
        self.const = MoEBlock(d, (c, w, h), self.cfg)

    def set_generator(self, generator):
        for block in (self.quad, self.linear, self.const):
            block.generator = generator

    def coefficients(self, window):
        phi = self.features(window)
        return CoefficientTensors(self.quad(phi), self.linear(phi), self.const(phi))

    def forward(self, window):
        return quadratic_transform(window, self.coefficients(window))
