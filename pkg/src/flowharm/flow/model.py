"""Exact-likelihood flow model: ordered transforms over a Gaussian base.

All likelihoods are reported on the 256-level integer intensity scale (the
1/256 rescale log-det is part of the dequantization stage), so bits/dimension
of discrete images and of continuous harmonizer outputs are directly
comparable. Inference entry points are pure given a parameter snapshot and a
noise seed, and safe to call concurrently on read-only parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ..data import ImageBatch
from ..errors import InvalidArgumentError, NumericFailureError
from ..seeding import seeded_torch, torch_generator
from .masks import channel_mask, checkerboard_mask
from .subnet import max_levels
from .transforms import CouplingLayer, DequantizationFlow, SqueezeOp

LOG_2PI = math.log(2 * math.pi)


def bits_per_dim_from_nll(nll: torch.Tensor, num_elements: int) -> torch.Tensor:
    """Convert negative log-likelihood (nats) to bits per dimension."""
    return nll / (math.log(2.0) * num_elements)


class FlowModel(nn.Module):
    """Composition g_1 .. g_T of invertible transforms with a N(0, I) base.

    ``forward_flow`` runs data -> latent and accumulates the log-determinant;
    ``inverse_flow`` undoes it. The latent always has exactly as many elements
    as the input.
    """

    def __init__(self, transforms: list[nn.Module]):
        super().__init__()
        self.transforms = nn.ModuleList(transforms)

    @property
    def num_squeezes(self) -> int:
        return sum(isinstance(t, SqueezeOp) for t in self.transforms)

    def _check_spatial(self, x: torch.Tensor) -> None:
        need = 2**self.num_squeezes
        h, w = x.shape[2], x.shape[3]
        if h % need or w % need:
            raise InvalidArgumentError(
                f"spatial dims {h}x{w} not divisible by {need} "
                f"(model applies {self.num_squeezes} squeeze ops)"
            )

    def forward_flow(
        self,
        x: torch.Tensor,
        discrete: bool,
        noise_seed: int | None = 0,
        generator: torch.Generator | None = None,
    ):
        """Run data -> latent. Returns (z, per-sample total logdet).

        Discrete inputs are dequantized by the first DequantizationFlow
        transform using ``noise_seed`` (or an explicit ``generator``).
        """
        self._check_spatial(x)
        if generator is None and noise_seed is not None:
            generator = torch_generator(noise_seed)
        z = x
        ldj = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        pending_discrete = discrete
        for idx, transform in enumerate(self.transforms):
            if isinstance(transform, DequantizationFlow):
                if pending_discrete:
                    z, ldj = transform.forward_discrete(z, ldj, generator)
                    pending_discrete = False
                else:
                    z, ldj = transform.forward_continuous(z, ldj)
            else:
                z, ldj = transform.forward(z, ldj)
            if not (torch.isfinite(z).all() and torch.isfinite(ldj).all()):
                raise NumericFailureError(
                    f"non-finite values after transform {idx} "
                    f"({type(transform).__name__})",
                    transform_index=idx,
                )
        if pending_discrete:
            # no dequantization stage in this model: treat values as continuous
            pass
        return z, ldj

    def inverse_flow(self, z: torch.Tensor):
        """Run latent -> data. Returns (x, per-sample logdet of the inverse)."""
        x = z
        ldj = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for idx in range(len(self.transforms) - 1, -1, -1):
            x, ldj = self.transforms[idx].inverse(x, ldj)
            if not torch.isfinite(x).all():
                raise NumericFailureError(
                    f"non-finite values inverting transform {idx}", transform_index=idx
                )
        return x, ldj

    def _base_log_prob(self, z: torch.Tensor) -> torch.Tensor:
        flat = z.reshape(z.shape[0], -1)
        return (-0.5 * flat.pow(2) - 0.5 * LOG_2PI).sum(dim=1)

    def log_likelihood_tensor(
        self, x: torch.Tensor, discrete: bool, noise_seed: int | None = 0
    ) -> torch.Tensor:
        """Per-sample log p(x) in nats (integer intensity scale)."""
        z, ldj = self.forward_flow(x, discrete=discrete, noise_seed=noise_seed)
        return self._base_log_prob(z) + ldj

    def log_likelihood(self, batch: ImageBatch, noise_seed: int | None = 0) -> torch.Tensor:
        return self.log_likelihood_tensor(batch.data, batch.discrete, noise_seed=noise_seed)

    def bits_per_dim_tensor(
        self, x: torch.Tensor, discrete: bool, noise_seed: int | None = 0
    ) -> torch.Tensor:
        nll = -self.log_likelihood_tensor(x, discrete, noise_seed=noise_seed)
        return bits_per_dim_from_nll(nll, int(x[0].numel()))

    def bits_per_dim(self, batch: ImageBatch, noise_seed: int | None = 0) -> torch.Tensor:
        """Per-sample bits/dimension: -log p(x) / (ln 2 * |Omega|)."""
        return self.bits_per_dim_tensor(batch.data, batch.discrete, noise_seed=noise_seed)

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


def flow_forward(x: ImageBatch, model: FlowModel, noise_seed: int | None = 0):
    """Data -> latent for an image batch: (z, total per-sample logdet)."""
    return model.forward_flow(x.data, x.discrete, noise_seed=noise_seed)


def log_likelihood(x: ImageBatch, model: FlowModel, noise_seed: int | None = 0) -> torch.Tensor:
    return model.log_likelihood(x, noise_seed=noise_seed)


def bits_per_dim(x: ImageBatch, model: FlowModel, noise_seed: int | None = 0) -> torch.Tensor:
    return model.bits_per_dim(x, noise_seed=noise_seed)


def dequantize(x: ImageBatch, deq: DequantizationFlow, seed: int):
    """Lift a discrete batch to continuous (0,1) images.

    Returns (continuous batch, per-sample log correction). The correction is
    the noise log-density term plus the 1/256 rescale log-det; adding it to
    the continuous model log-density yields the discrete-image likelihood
    bound.
    """
    if not x.discrete:
        raise InvalidArgumentError("dequantize requires a discrete ImageBatch")
    gen = torch_generator(seed)
    ldj = torch.zeros(x.batch_size, dtype=x.data.dtype)
    v, correction = deq.forward_discrete(x.data, ldj, gen)
    return ImageBatch(v, discrete=False), correction


@dataclass
class FlowArchitecture:
    """Configuration of the standard flow stack.

    The stack is: learned dequantization (checkerboard couplings conditioned
    on the raw image), a block of checkerboard couplings at input scale, a
    squeeze, a block of channel-masked couplings, a second squeeze, and a
    final block of channel-masked couplings. All dimensions are kept through
    every scale; nothing is factored out early.
    """

    height: int = 64
    width: int = 64
    vardeq_couplings: int = 4
    couplings_per_block: tuple[int, int, int] = (4, 4, 4)
    subnet_width: int = 32
    subnet_levels: int = 4
    subnet_width_cap: int = 128
    scale_bound: float = 3.0
    format_tag: str = field(default="flowharm-flow-v1", repr=False)

    def to_dict(self) -> dict:
        d = {
            "height": self.height,
            "width": self.width,
            "vardeq_couplings": self.vardeq_couplings,
            "couplings_per_block": list(self.couplings_per_block),
            "subnet_width": self.subnet_width,
            "subnet_levels": self.subnet_levels,
            "subnet_width_cap": self.subnet_width_cap,
            "scale_bound": self.scale_bound,
            "format_tag": self.format_tag,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FlowArchitecture":
        d = dict(d)
        d["couplings_per_block"] = tuple(d["couplings_per_block"])
        return cls(**d)


def build_flow(arch: FlowArchitecture, seed: int = 0) -> FlowModel:
    """Construct the standard flow with deterministic, seeded initialization."""
    h, w = arch.height, arch.width
    if h % 4 or w % 4:
        raise InvalidArgumentError("flow input dims must be divisible by 4")

    def levels_at(hh, ww):
        return min(arch.subnet_levels, max_levels(hh, ww))

    with seeded_torch(seed):
        transforms: list[nn.Module] = [
            DequantizationFlow(
                h,
                w,
                n_couplings=arch.vardeq_couplings,
                base_width=max(arch.subnet_width // 2, 4),
                levels=levels_at(h, w),
                width_cap=arch.subnet_width_cap,
                scale_bound=arch.scale_bound,
            )
        ]
        for i in range(arch.couplings_per_block[0]):
            transforms.append(
                CouplingLayer(
                    checkerboard_mask(1, h, w, parity=i % 2),
                    base_width=arch.subnet_width,
                    levels=levels_at(h, w),
                    width_cap=arch.subnet_width_cap,
                    scale_bound=arch.scale_bound,
                )
            )
        transforms.append(SqueezeOp())
        for i in range(arch.couplings_per_block[1]):
            transforms.append(
                CouplingLayer(
                    channel_mask(4, h // 2, w // 2, parity=i % 2),
                    base_width=arch.subnet_width,
                    levels=levels_at(h // 2, w // 2),
                    width_cap=arch.subnet_width_cap,
                    scale_bound=arch.scale_bound,
                )
            )
        transforms.append(SqueezeOp())
        for i in range(arch.couplings_per_block[2]):
            transforms.append(
                CouplingLayer(
                    channel_mask(16, h // 4, w // 4, parity=i % 2),
                    base_width=arch.subnet_width,
                    levels=levels_at(h // 4, w // 4),
                    width_cap=arch.subnet_width_cap,
                    scale_bound=arch.scale_bound,
                )
            )
        model = FlowModel(transforms)
    return model
