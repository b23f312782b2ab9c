"""Harmonizer network: per-image gain, per-pixel bias, output alpha*x + beta.

A shallow U-shaped encoder/decoder reads the image; a scalar head on the
bottleneck emits alpha, a zero-initialized head at input resolution emits
beta. The output is exactly affine in the input given those readouts, and the
fresh network is the exact identity (alpha=1, beta=0). Pretraining teaches it
to undo unconstrained intensity augmentations of source images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import sample_pretrain_augmentation
from .data import DomainDataset, ImageBatch
from .errors import InvalidArgumentError
from .flow.subnet import ConcatELU
from .seeding import numpy_rng, seeded_torch, torch_generator

HARMONIZER_WIDTHS = (16, 32, 48, 64, 64)


def _level(c_in: int, c_out: int) -> nn.Sequential:
    # two blocks of modified ELU -> convolution
    return nn.Sequential(
        ConcatELU(),
        nn.Conv2d(2 * c_in, c_out, kernel_size=3, padding=1),
        ConcatELU(),
        nn.Conv2d(2 * c_out, c_out, kernel_size=3, padding=1),
    )


class HarmonizerNet(nn.Module):
    """Five scale levels (factor 2) with widths 16, 32, 48, 64, 64."""

    format_tag = "flowharm-harmonizer-v1"

    def __init__(self, widths: tuple[int, ...] = HARMONIZER_WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        n = len(widths)
        self.stem = nn.Conv2d(1, widths[0], kernel_size=3, padding=1)
        self.enc = nn.ModuleList(
            _level(widths[i - 1] if i else widths[0], widths[i]) for i in range(n)
        )
        self.dec = nn.ModuleList(
            _level(widths[i] + widths[i + 1], widths[i]) for i in range(n - 1)
        )
        self.alpha_head = nn.Linear(widths[-1], 1)
        self.beta_head = nn.Conv2d(widths[0], 1, kernel_size=1)
        # near-identity start: alpha = 1 exactly, beta = 0 exactly
        nn.init.zeros_(self.alpha_head.weight)
        nn.init.ones_(self.alpha_head.bias)
        nn.init.zeros_(self.beta_head.weight)
        nn.init.zeros_(self.beta_head.bias)

    @property
    def downsamplings(self) -> int:
        return len(self.widths) - 1

    def heads(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Compute (alpha, beta) readouts: shapes (B, 1, 1, 1) and (B, 1, H, W)."""
        need = 2**self.downsamplings
        if x.ndim != 4 or x.shape[1] != 1:
            raise InvalidArgumentError(f"expected (B, 1, H, W), got {tuple(x.shape)}")
        if x.shape[2] % need or x.shape[3] % need:
            raise InvalidArgumentError(
                f"harmonizer needs spatial dims divisible by {need}, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        h = self.stem(x)
        skips = []
        for i, level in enumerate(self.enc):
            h = level(h)
            if i < len(self.enc) - 1:
                skips.append(h)
                h = F.avg_pool2d(h, 2)
        alpha = self.alpha_head(h.mean(dim=(2, 3))).view(-1, 1, 1, 1)
        for i in range(len(self.dec) - 1, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec[i](torch.cat([skips[i], h], dim=1))
        beta = self.beta_head(h)
        return alpha, beta

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        alpha, beta = self.heads(x)
        return alpha * x + beta


def harmonize(x: ImageBatch, net: HarmonizerNet):
    """Apply the harmonizer; returns (output batch, alpha, beta) for logging.

    The output is not clipped: the flow consumes raw values, clipping is for
    image export only.
    """
    if x.discrete:
        x = x.to_continuous()
    alpha, beta = net.heads(x.data)
    y = alpha * x.data + beta
    return ImageBatch(y, discrete=False), alpha.reshape(-1), beta


@dataclass
class HarmonizerTrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_period: int = 30
    batch_size: int = 32
    copies_per_image: int = 4  # independent augmentations per image per step
    seed: int = 0

    def __post_init__(self):
        if (
            self.epochs < 0
            or self.lr <= 0
            or self.batch_size <= 0
            or self.decay_period <= 0
            or self.copies_per_image <= 0
        ):
            raise InvalidArgumentError("harmonizer config values must be positive")


def _augmented_copies(
    images: torch.Tensor, rng: np.random.Generator
) -> torch.Tensor:
    return torch.stack(
        [sample_pretrain_augmentation(images[i], rng)[0] for i in range(images.shape[0])]
    )


def pretrain_harmonizer(
    dataset: DomainDataset, config: HarmonizerTrainConfig
) -> tuple[HarmonizerNet, list[dict]]:
    """Train the harmonizer to reconstruct source images from augmentations.

    Returns the trained network and a per-epoch log with train loss and the
    held-out reconstruction MSE on a fixed augmented validation set.
    """
    train = dataset.image_batch("train").to_continuous().data
    with seeded_torch(config.seed):
        net = HarmonizerNet()
    if config.epochs == 0:
        return net, []

    has_val = bool(dataset.indices("val"))
    if has_val:
        val = dataset.image_batch("val").to_continuous().data
        val_aug = _augmented_copies(val, numpy_rng(config.seed + 1))

    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, config.decay_period, gamma=config.lr_decay)
    aug_rng = numpy_rng(config.seed)
    shuffle_gen = torch_generator(config.seed)
    log = []
    for epoch in range(config.epochs):
        perm = torch.randperm(train.shape[0], generator=shuffle_gen)
        epoch_losses = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = train[idx].repeat(config.copies_per_image, 1, 1, 1)
            x_aug = _augmented_copies(x, aug_rng)
            loss = F.mse_loss(net(x_aug), x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        sched.step()
        record = {
            "epoch": epoch,
            "train_mse": float(np.mean(epoch_losses)),
            "lr": float(opt.param_groups[0]["lr"]),
        }
        if has_val:
            with torch.no_grad():
                record["val_mse"] = float(F.mse_loss(net(val_aug), val))
        log.append(record)
    return net, log
