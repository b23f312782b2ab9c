"""Flow training: likelihood loss plus the margin-clamped guiding term.

Each batch mixes plain source images with strongly augmented copies of a
random subset. The augmented term is clamped at a margin so sufficiently
unlikely augmentations stop contributing gradient; this steers the density
toward site-style features (contrast, brightness) instead of subject content.
Both loss terms are reported in bits/dimension so the margin value is
dimensionally meaningful; a whole-image-nats reading is available behind
``margin_in_nats`` for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import sample_guided_augmentation
from .data import DomainDataset, ImageBatch, to_continuous
from .errors import InvalidArgumentError
from .flow import FlowArchitecture, FlowModel, build_flow
from .seeding import numpy_rng, torch_generator


@dataclass
class FlowTrainConfig:
    epochs: int = 1600
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_period: int = 200
    batch_size: int = 32
    margin_c: float = 1.2  # bits/dimension
    margin_in_nats: bool = False  # alternative clamp scale (whole-image nats)
    aug_fraction: float = 0.25
    guided: bool = True
    guided_threshold: float = 0.01
    guided_max_tries: int = 50
    grad_clip: float = 100.0
    seed: int = 0
    arch: FlowArchitecture | None = None

    def __post_init__(self):
        if self.margin_c <= 0:
            raise InvalidArgumentError("margin_c must be positive")
        if not (0.0 < self.aug_fraction < 1.0):
            raise InvalidArgumentError("aug_fraction must lie in (0, 1)")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise InvalidArgumentError("lr must be positive, epochs non-negative")


def nf_loss(batch: ImageBatch, model: FlowModel, noise_seed: int | None = 0) -> torch.Tensor:
    """Mean negative log-likelihood in bits/dimension (= mean bits_per_dim)."""
    return model.bits_per_dim(batch, noise_seed=noise_seed).mean()


def guided_loss(
    source_batch: ImageBatch,
    aug_batch: ImageBatch,
    model: FlowModel,
    c: float,
    noise_seed: int | None = 0,
    margin_in_nats: bool = False,
) -> torch.Tensor:
    """Source NLL minus the clamped augmented NLL (both bits/dimension).

    Augmented samples contribute at most ``c`` each; once their NLL exceeds
    the margin the clamp saturates and they stop producing gradient.
    """
    if margin_in_nats:
        src = -model.log_likelihood(source_batch, noise_seed=noise_seed).mean()
        aug_nll = -model.log_likelihood(aug_batch, noise_seed=noise_seed)
        return src - torch.clamp(aug_nll, max=c).mean()
    src = model.bits_per_dim(source_batch, noise_seed=noise_seed).mean()
    aug_bpd = model.bits_per_dim(aug_batch, noise_seed=noise_seed)
    return src - torch.clamp(aug_bpd, max=c).mean()


@dataclass
class FlowTrainResult:
    model: FlowModel
    log: list[dict] = field(default_factory=list)
    source_bpd_ref: float = float("nan")
    arch: FlowArchitecture | None = None


def source_reference_bpd(model: FlowModel, batch: ImageBatch) -> float:
    """Stopping reference: continuous-path bpd of images at cell centers.

    This is the same evaluator the adaptation loop applies to harmonizer
    outputs, so the reference and the adaptation metric are directly
    comparable with no dequantization-noise offset between them.
    """
    with torch.no_grad():
        cont = batch.to_continuous()
        return float(model.bits_per_dim(cont, noise_seed=None).mean())


def train_flow(
    dataset: DomainDataset,
    config: FlowTrainConfig,
    out_dir: Path | None = None,
) -> FlowTrainResult:
    """Train the flow on a source dataset's training split.

    Returns the model, a per-epoch log (train loss, validation bpd, lr) and
    the source-reference bpd used later as the adaptation stopping target.
    Fixed seed plus the deterministic flag reproduce runs bitwise.
    """
    train = dataset.image_batch("train")  # raises on empty split
    h, w = train.data.shape[2], train.data.shape[3]
    arch = config.arch or FlowArchitecture(height=h, width=w)
    if (arch.height, arch.width) != (h, w):
        raise InvalidArgumentError(
            f"architecture is {arch.height}x{arch.width} but images are {h}x{w}"
        )
    model = build_flow(arch, seed=config.seed)
    result = FlowTrainResult(model=model, arch=arch)

    has_val = bool(dataset.indices("val"))
    if has_val:
        val = dataset.image_batch("val")
    if config.epochs == 0:
        if has_val:
            result.source_bpd_ref = source_reference_bpd(model, val)
        return result

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, config.decay_period, gamma=config.lr_decay)
    aug_rng = numpy_rng(config.seed + 1)
    shuffle_gen = torch_generator(config.seed + 2)
    seed_stream = numpy_rng(config.seed + 3)

    best_val = float("inf")
    log_path = out_dir / "flow_train_log.jsonl" if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = train.data.shape[0]
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=shuffle_gen)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = train.data[idx]
            step_seed = int(seed_stream.integers(2**31))
            n_aug = int(round(config.aug_fraction * len(idx))) if config.guided else 0
            if n_aug > 0:
                aug_imgs = []
                for i in range(n_aug):
                    cont = to_continuous(x[i])
                    aug, _ = sample_guided_augmentation(
                        cont,
                        threshold=config.guided_threshold,
                        max_tries=config.guided_max_tries,
                        rng=aug_rng,
                    )
                    aug_imgs.append(aug)
                aug_batch = ImageBatch(torch.stack(aug_imgs), discrete=False)
                src_batch = ImageBatch(x[n_aug:], discrete=True)
                # per-sample weighting of the total objective: source and
                # clamped augmented sums over one batch of N samples
                n_src = len(idx) - n_aug
                if config.margin_in_nats:
                    src_term = -model.log_likelihood(src_batch, noise_seed=step_seed).sum()
                    aug_nll = -model.log_likelihood(aug_batch, noise_seed=step_seed)
                    aug_term = torch.clamp(aug_nll, max=config.margin_c).sum()
                else:
                    src_term = model.bits_per_dim(src_batch, noise_seed=step_seed).sum()
                    aug_bpd = model.bits_per_dim(aug_batch, noise_seed=step_seed)
                    aug_term = torch.clamp(aug_bpd, max=config.margin_c).sum()
                loss = (src_term - aug_term) / (n_src + n_aug)
            else:
                loss = nf_loss(ImageBatch(x, discrete=True), model, noise_seed=step_seed)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            losses.append(loss.item())
        sched.step()

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "lr": float(opt.param_groups[0]["lr"]),
        }
        if has_val:
            with torch.no_grad():
                record["val_bpd"] = float(model.bits_per_dim(val, noise_seed=0).mean())
        result.log.append(record)
        if log_path:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if out_dir:
            from .checkpoint import save_flow_checkpoint

            if (epoch + 1) % config.decay_period == 0:
                save_flow_checkpoint(out_dir / f"flow_epoch{epoch + 1:05d}.pt", model, arch)
            if has_val and record["val_bpd"] < best_val:
                best_val = record["val_bpd"]
                save_flow_checkpoint(out_dir / "flow_best.pt", model, arch)

    if has_val:
        result.source_bpd_ref = source_reference_bpd(model, val)
    return result


def heldout_bpd_gap(
    model: FlowModel, batch: ImageBatch, aug_seed: int = 0, threshold: float = 0.01
) -> float:
    """Mean bpd(guided-augmented images) minus mean bpd(images).

    Both sides use the continuous evaluator so the gap is free of
    dequantization-noise asymmetry.
    """
    rng = numpy_rng(aug_seed)
    cont = batch.to_continuous()
    augs = torch.stack(
        [
            sample_guided_augmentation(cont.data[i], threshold=threshold, rng=rng)[0]
            for i in range(cont.data.shape[0])
        ]
    )
    with torch.no_grad():
        source_bpd = model.bits_per_dim(cont, noise_seed=None).mean()
        aug_bpd = model.bits_per_dim(
            ImageBatch(augs, discrete=False), noise_seed=None
        ).mean()
    return float(aug_bpd - source_bpd)
