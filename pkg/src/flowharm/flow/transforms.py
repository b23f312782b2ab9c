"""Invertible transforms: affine coupling, squeeze, learned dequantization.

Direction convention, used everywhere in this package: ``forward`` maps data
toward the latent space, ``inverse`` maps latent back to data. Both directions
return the transformed tensor together with the accumulated per-sample
log-determinant of the *forward* Jacobian (the inverse subtracts what the
forward added).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..data import QUANT_LEVELS
from ..errors import InvalidArgumentError
from .masks import CouplingMask, checkerboard_mask
from .subnet import CouplingSubnet


class CouplingLayer(nn.Module):
    """Affine coupling: partition A passes through, partition B is rescaled.

        y^A = z^A
        y^B = z^B * exp(s(z^A)) + t(z^A)

    The raw scale field is squashed through ``amp * tanh(s / amp)`` with a
    learnable per-channel amplitude capped at ``scale_bound``, so ``exp(s)``
    can never overflow no matter what the subnet emits.
    """

    def __init__(
        self,
        mask: CouplingMask,
        base_width: int = 32,
        levels: int = 4,
        width_cap: int = 128,
        cond_channels: int = 0,
        scale_bound: float = 3.0,
    ):
        super().__init__()
        self.mask_spec = mask
        self.register_buffer("mask", mask.build().unsqueeze(0))
        self.subnet = CouplingSubnet(
            in_channels=mask.channels + cond_channels,
            out_channels=mask.channels,
            base_width=base_width,
            levels=levels,
            width_cap=width_cap,
        )
        self.log_amp = nn.Parameter(torch.zeros(mask.channels))
        self.max_log_amp = math.log(scale_bound)
        self.cond_channels = cond_channels

    def _check_shape(self, z: torch.Tensor) -> None:
        if tuple(z.shape[1:]) != tuple(self.mask.shape[1:]):
            raise InvalidArgumentError(
                f"input shape {tuple(z.shape[1:])} does not match mask shape "
                f"{tuple(self.mask.shape[1:])}"
            )

    def _scale_shift(self, z: torch.Tensor, cond: torch.Tensor | None):
        z_a = z * self.mask
        net_in = z_a if cond is None else torch.cat([z_a, cond], dim=1)
        raw = self.subnet(net_in)
        s_raw, t = raw.chunk(2, dim=1)
        amp = torch.exp(self.log_amp.clamp(max=self.max_log_amp)).view(1, -1, 1, 1)
        s = amp * torch.tanh(s_raw / amp)
        # transform only partition B
        return s * (1 - self.mask), t * (1 - self.mask)

    def forward(self, z, ldj, cond=None):
        self._check_shape(z)
        s, t = self._scale_shift(z, cond)
        y = z * torch.exp(s) + t
        return y, ldj + s.sum(dim=(1, 2, 3))

    def inverse(self, y, ldj, cond=None):
        self._check_shape(y)
        s, t = self._scale_shift(y, cond)  # s, t depend only on partition A = y^A
        z = (y - t) * torch.exp(-s)
        return z, ldj - s.sum(dim=(1, 2, 3))


def coupling_forward(z: torch.Tensor, layer: CouplingLayer, cond=None):
    """One coupling layer, data->latent; returns (y, per-sample logdet)."""
    return layer.forward(z, torch.zeros(z.shape[0], dtype=z.dtype, device=z.device), cond=cond)


def coupling_inverse(y: torch.Tensor, layer: CouplingLayer, cond=None):
    """One coupling layer, latent->data; logdet is minus the forward logdet."""
    return layer.inverse(y, torch.zeros(y.shape[0], dtype=y.dtype, device=y.device), cond=cond)


class SqueezeOp(nn.Module):
    """Factor-2 space-to-channel rearrangement: (C, H, W) -> (4C, H/2, W/2).

    A pure permutation of elements: volume-preserving, zero log-det.
    """

    factor = 2

    def forward(self, z, ldj, cond=None):
        b, c, h, w = z.shape
        if h % 2 or w % 2:
            raise InvalidArgumentError(f"squeeze needs even spatial dims, got {h}x{w}")
        z = z.reshape(b, c, h // 2, 2, w // 2, 2)
        z = z.permute(0, 1, 3, 5, 2, 4)
        return z.reshape(b, 4 * c, h // 2, w // 2), ldj

    def inverse(self, z, ldj, cond=None):
        b, c, h, w = z.shape
        if c % 4:
            raise InvalidArgumentError(f"unsqueeze needs channels divisible by 4, got {c}")
        z = z.reshape(b, c // 4, 2, 2, h, w)
        z = z.permute(0, 1, 4, 2, 5, 3)
        return z.reshape(b, c // 4, 2 * h, 2 * w), ldj


def _log_sigmoid_deriv(z: torch.Tensor) -> torch.Tensor:
    # log sigma'(z) = log sigma(z) + log sigma(-z)
    return -z - 2 * F.softplus(-z)


class DequantizationFlow(nn.Module):
    """Learned dequantization: lifts 256-level integers into (0, 1) floats.

    The sub-level noise q is produced by a small conditional coupling flow:
    uniform draws are mapped through checkerboard couplings (conditioned on
    the raw image) and squashed back into (0, 1) by a logistic map, with every
    log-det tracked. The forward output is (x + q) / 256 together with the
    correction term (noise log-density plus the 1/256 rescale log-det), which
    makes all downstream likelihoods live on the integer intensity scale.

    Continuous inputs (already in (0, 1)) skip the noise model; only the
    rescale log-det applies, keeping continuous and discrete evaluations of
    the same model directly comparable.
    """

    def __init__(
        self,
        height: int,
        width: int,
        n_couplings: int = 4,
        base_width: int = 16,
        levels: int = 2,
        width_cap: int = 128,
        scale_bound: float = 3.0,
        alpha: float = 1e-5,
    ):
        super().__init__()
        self.height = height
        self.width = width
        self.alpha = alpha
        self.couplings = nn.ModuleList(
            CouplingLayer(
                checkerboard_mask(1, height, width, parity=i % 2),
                base_width=base_width,
                levels=levels,
                width_cap=width_cap,
                cond_channels=1,
                scale_bound=scale_bound,
            )
            for i in range(n_couplings)
        )

    def _num_elements(self, x: torch.Tensor) -> int:
        return int(x[0].numel())

    def sample_noise(self, x_int: torch.Tensor, generator: torch.Generator | None):
        """Draw q in (0,1)^D from the learned conditional noise flow.

        Returns (q, noise_logdet) with noise_logdet = -log q_noise(q | x),
        accumulated over the uniform-to-q transform chain.
        """
        ldj = torch.zeros(x_int.shape[0], dtype=x_int.dtype, device=x_int.device)
        u = torch.rand(x_int.shape, dtype=x_int.dtype, device=x_int.device, generator=generator)
        d = self._num_elements(x_int)
        # squeeze away from the {0, 1} boundary, then to logit space
        u = u * (1 - self.alpha) + 0.5 * self.alpha
        ldj = ldj + d * math.log(1 - self.alpha)
        ldj = ldj + (-torch.log(u) - torch.log1p(-u)).sum(dim=(1, 2, 3))
        z = torch.log(u) - torch.log1p(-u)
        cond = 2 * (x_int + 0.5) / QUANT_LEVELS - 1
        for layer in self.couplings:
            z, ldj = layer.forward(z, ldj, cond=cond)
        ldj = ldj + _log_sigmoid_deriv(z).sum(dim=(1, 2, 3))
        return torch.sigmoid(z), ldj

    def forward_discrete(self, x_int: torch.Tensor, ldj, generator: torch.Generator | None):
        q, noise_ldj = self.sample_noise(x_int, generator)
        v = (x_int + q) / QUANT_LEVELS
        d = self._num_elements(x_int)
        return v, ldj + noise_ldj - d * math.log(QUANT_LEVELS)

    def forward_continuous(self, x: torch.Tensor, ldj):
        return x, ldj - self._num_elements(x) * math.log(QUANT_LEVELS)

    def inverse(self, v, ldj, cond=None):
        """Recover the discrete image: floor(v * 256). Noise terms are not
        part of the inverse; only the rescale log-det is undone."""
        x = torch.clamp(torch.floor(v * QUANT_LEVELS), 0, QUANT_LEVELS - 1)
        return x, ldj + self._num_elements(v) * math.log(QUANT_LEVELS)
