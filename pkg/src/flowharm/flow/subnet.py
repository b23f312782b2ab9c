"""U-shaped convolutional subnet used inside coupling layers.

Each scale level applies a modified ELU (concat(ELU(x), ELU(-x))), a 3x3
convolution and a per-channel normalization over spatial positions (no
cross-sample statistics, so outputs do not depend on batch composition).
Levels are connected by factor-2 pooling / nearest upsampling with skip
connections. The output head is zero-initialized so a fresh coupling layer
starts as the identity.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConcatELU(nn.Module):
    """ELU applied in both directions; doubles the channel count."""

    def forward(self, x):
        return torch.cat([F.elu(x), F.elu(-x)], dim=1)


class ChannelNorm(nn.Module):
    """Per-sample, per-channel affine normalization over spatial dims."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + self.eps) * self.gamma + self.beta


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        ConcatELU(),
        nn.Conv2d(2 * c_in, c_out, kernel_size=3, padding=1),
        ChannelNorm(c_out),
    )


def max_levels(height: int, width: int) -> int:
    """How many scale levels a (H, W) input supports (factor-2 pooling)."""
    n = 1
    h, w = height, width
    while h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2:
        n += 1
        h //= 2
        w //= 2
    return n


class CouplingSubnet(nn.Module):
    """Maps the visible partition to stacked (scale, shift) fields.

    Output has ``2 * out_channels`` channels: the first half is the raw scale
    field, the second half the shift field.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        base_width: int = 32,
        levels: int = 4,
        width_cap: int = 128,
    ):
        super().__init__()
        if levels < 1:
            raise ValueError("subnet needs at least one level")
        widths = [min(base_width * 2**i, width_cap) for i in range(levels)]
        self.levels = levels
        self.stem = nn.Conv2d(in_channels, widths[0], kernel_size=3, padding=1)
        self.enc = nn.ModuleList(_block(widths[i], widths[i]) for i in range(levels))
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], kernel_size=1) for i in range(levels - 1)
        )
        self.dec = nn.ModuleList(
            _block(widths[i] + widths[i + 1], widths[i]) for i in range(levels - 1)
        )
        self.head = nn.Sequential(
            ConcatELU(), nn.Conv2d(2 * widths[0], 2 * out_channels, kernel_size=3, padding=1)
        )
        nn.init.zeros_(self.head[1].weight)
        nn.init.zeros_(self.head[1].bias)

    def forward(self, x):
        h = self.stem(x)
        skips = []
        for i in range(self.levels):
            h = self.enc[i](h)
            if i < self.levels - 1:
                skips.append(h)
                h = self.down[i](F.avg_pool2d(h, 2))
        for i in range(self.levels - 2, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec[i](torch.cat([skips[i], h], dim=1))
        return self.head(h)
