"""Downstream segmentation network, trained on source and frozen thereafter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DomainDataset
from .errors import InvalidArgumentError
from .seeding import seeded_torch, torch_generator

SEGMENTER_WIDTHS = (16, 32, 64, 128)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.ELU(),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
        nn.ELU(),
    )


class SegmentationNet(nn.Module):
    """Small 4-level U-shape emitting per-pixel class probabilities."""

    format_tag = "flowharm-segmenter-v1"

    def __init__(self, num_classes: int, widths: tuple[int, ...] = SEGMENTER_WIDTHS):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        n = len(widths)
        self.enc = nn.ModuleList(
            _conv_block(1 if i == 0 else widths[i - 1], widths[i]) for i in range(n)
        )
        self.dec = nn.ModuleList(
            _conv_block(widths[i] + widths[i + 1], widths[i]) for i in range(n - 1)
        )
        self.head = nn.Conv2d(widths[0], num_classes, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        need = 2 ** (len(self.widths) - 1)
        if x.shape[2] % need or x.shape[3] % need:
            raise InvalidArgumentError(
                f"segmenter needs spatial dims divisible by {need}"
            )
        h = x
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h)
            if i < len(self.enc) - 1:
                skips.append(h)
                h = F.max_pool2d(h, 2)
        for i in range(len(self.dec) - 1, -1, -1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec[i](torch.cat([skips[i], h], dim=1))
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel probability simplex (B, K, H, W)."""
        return torch.softmax(self.logits(x), dim=1)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.logits(x).argmax(dim=1)


@dataclass
class SegmenterTrainConfig:
    epochs: int = 200
    lr: float = 4e-3
    lr_decay: float = 0.5
    decay_period: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0 or self.decay_period <= 0:
            raise InvalidArgumentError("segmenter config values must be positive")


def train_segmenter(
    source: DomainDataset, config: SegmenterTrainConfig
) -> tuple[SegmentationNet, list[dict]]:
    """Cross-entropy training on the source split; caller freezes afterward."""
    if not source.masks or any(m is None for m in source.masks):
        raise InvalidArgumentError("segmenter training requires masks")
    images = source.image_batch("train").to_continuous().data
    masks = source.mask_batch("train")
    with seeded_torch(config.seed):
        net = SegmentationNet(num_classes=source.num_classes)
    if config.epochs == 0:
        return net, []

    # inverse-sqrt frequency class weights: keeps the dominant background from
    # collapsing training into a constant predictor on tiny datasets
    counts = torch.bincount(masks.reshape(-1), minlength=source.num_classes).double()
    weights = (1.0 / counts.clamp(min=1).sqrt()).float()
    weights = weights / weights.mean()

    has_val = bool(source.indices("val"))
    if has_val:
        val_images = source.image_batch("val").to_continuous().data
        val_masks = source.mask_batch("val")

    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, config.decay_period, gamma=config.lr_decay)
    shuffle_gen = torch_generator(config.seed + 1)
    log = []
    for epoch in range(config.epochs):
        perm = torch.randperm(images.shape[0], generator=shuffle_gen)
        losses = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss = F.cross_entropy(net.logits(images[idx]), masks[idx], weight=weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        sched.step()
        record = {
            "epoch": epoch,
            "train_ce": float(np.mean(losses)),
            "lr": float(opt.param_groups[0]["lr"]),
        }
        if has_val:
            from .metrics import per_image_scores

            with torch.no_grad():
                preds = net.predict(val_images)
            scores = [
                per_image_scores(preds[i].numpy(), val_masks[i].numpy(), source.num_classes)[0]
                for i in range(preds.shape[0])
            ]
            record["val_dsc"] = float(np.mean(scores))
        log.append(record)
    return net, log
