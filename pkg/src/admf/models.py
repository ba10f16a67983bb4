"""Model assembly: the ADNN variants and the flattened-LSTM baseline.

Every model maps a window ``(B, k, 1, n, n)`` to a raw prediction
``(B, 1, n, n)`` in the window's original asset order.
"""
from __future__ import annotations

import torch
from torch import nn

from admf.forecaster import ConvLSTMForecaster, ForecasterConfig
from admf.transform import QuadraticMoETransform, TransformConfig

VARIANTS = {
    # name: (use_rearrangement, use_transform)
    "Raw-ConvLSTM": (False, False),
    "P-ADNN": (True, False),
    "T-ADNN": (False, True),
    "PT-ADNN": (True, True),
}


class ADNN(nn.Module):
    """Rearrangement -> MoE quadratic transform -> ConvLSTM, each stage optional."""

    def __init__(self, n, k, transform_cfg=None, forecaster_cfg=None, c=1):
        super().__init__()
        self.n, self.k, self.c = n, k, c
        self.forecaster_cfg = forecaster_cfg or ForecasterConfig()
        self.transform_cfg = transform_cfg or TransformConfig()
        if self.forecaster_cfg.use_transform:
            self.transform_block = QuadraticMoETransform(k, c, n, n, self.transform_cfg)
        else:
            self.transform_block = None
        self.forecaster = ConvLSTMForecaster(c, n, n, self.forecaster_cfg)
        self.register_buffer("perm", torch.arange(n))

    def set_ordering(self, index):
        """Install the asset permutation (positions into the original order)."""
        index = torch.as_tensor(index, dtype=torch.long)
        if sorted(index.tolist()) != list(range(self.n)):
            raise ValueError("ordering index is not a permutation")
        self.perm.copy_(index)

    def set_generator(self, generator):
        if self.transform_block is not None:
            self.transform_block.set_generator(generator)

    def apply_rearrangement(self, x):
        if not self.forecaster_cfg.use_rearrangement:
            return x
        p = self.perm
        return x[..., p, :][..., :, p]

    def undo_rearrangement(self, E):
        if not self.forecaster_cfg.use_rearrangement:
            return E
        inv = torch.argsort(self.perm)
        return E[..., inv, :][..., :, inv]

    def apply_transform(self, x):
        if self.transform_block is None:
            return x
        return self.transform_block(x)

    def forward(self, x):
        x = self.apply_rearrangement(x)
        x = self.apply_transform(x)
        return self.undo_rearrangement(self.forecaster(x))


class FlatLSTM(nn.Module):
    """Each ADM flattened to an n*n vector, a standard LSTM, linear head back to n*n."""

    def __init__(self, n, hidden=64, layers=1):
        super().__init__()
        self.n = n
        self.lstm = nn.LSTM(n * n, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, n * n)

    def set_generator(self, generator):
        pass

    def forward(self, x):
        B, k = x.shape[:2]
        if x.shape[-2:] != (self.n, self.n):
            raise ValueError(f"expected {self.n}x{self.n} frames, got {tuple(x.shape[-2:])}")
        out, _ = self.lstm(x.reshape(B, k, -1))
        return self.head(out[:, -1]).view(B, 1, self.n, self.n)


def assemble_variant(name, n, k, transform_cfg=None, forecaster_cfg=None):
    """Build one of ``Raw-ConvLSTM``, ``P-ADNN``, ``T-ADNN``, ``PT-ADNN``."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    rearr, trans = VARIANTS[name]
    base = forecaster_cfg or ForecasterConfig()
    cfg = ForecasterConfig(layers=base.layers, hidden_channels=base.hidden_channels,
                           kernel_size=base.kernel_size, use_transform=trans,
                           use_rearrangement=rearr, use_psd=base.use_psd,
                           renormalize_correlation=base.renormalize_correlation)
    return ADNN(n, k, transform_cfg, cfg)
