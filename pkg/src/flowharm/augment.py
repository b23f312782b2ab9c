"""Intensity-transform family shared by flow guiding and harmonizer pretraining.

All transforms are intensity-only (they commute with any spatial permutation)
and monotone non-decreasing, so pixel ordering is preserved exactly. Sampling
is stateless given an explicit numpy Generator and is safe to run concurrently
with independent streams.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgumentError, SamplingFailureError

logger = logging.getLogger(__name__)

KINDS = ("contrast", "brightness", "multiplication", "monotone_map")

# sampling ranges for random draws
CONTRAST_RANGE = (0.4, 2.5)
BRIGHTNESS_RANGE = (-0.3, 0.3)
MULTIPLIER_RANGE = (0.5, 1.5)
MONOTONE_POINTS = 5

DEFAULT_GUIDED_THRESHOLD = 0.01
DEFAULT_MAX_TRIES = 50


@dataclass(frozen=True)
class AugmentationSpec:
    """One intensity transform: a kind plus its parameters.

    contrast: params = (gamma,), applied as x**gamma
    brightness: params = (b,), applied as x + b
    multiplication: params = (m,), applied as m * x
    monotone_map: params = y-values at 5 uniformly spaced control points,
                  strictly increasing, applied by linear interpolation
    """

    kind: str
    params: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "monotone_map":
            ys = np.asarray(self.params)
            if len(ys) < 2 or not (np.diff(ys) > 0).all():
                raise InvalidArgumentError(
                    "monotone_map control points must be strictly increasing"
                )

    def describe(self) -> str:
        """Human-readable record for run logs."""
        return json.dumps({"kind": self.kind, "params": [round(p, 6) for p in self.params]})


def _apply_one(x: torch.Tensor, spec: AugmentationSpec) -> torch.Tensor:
    if spec.kind == "contrast":
        return x.clamp(0.0, 1.0) ** spec.params[0]
    if spec.kind == "brightness":
        return x + spec.params[0]
    if spec.kind == "multiplication":
        return x * spec.params[0]
    # monotone_map: piecewise-linear over uniformly spaced control points
    ys = np.asarray(spec.params, dtype=np.float64)
    xs = np.linspace(0.0, 1.0, len(ys))
    out = np.interp(x.clamp(0.0, 1.0).numpy().astype(np.float64), xs, ys)
    return torch.from_numpy(out).to(x.dtype)


def apply_augmentation(
    x: torch.Tensor, specs: AugmentationSpec | list[AugmentationSpec]
) -> torch.Tensor:
    """Apply one spec or a composition in order; output clipped to [0, 1].

    Spatial shape is unchanged; clipping happens once at the end so
    compositions behave as clip(f_k(...f_1(x))).
    """
    if isinstance(specs, AugmentationSpec):
        specs = [specs]
    y = x
    for spec in specs:
        y = _apply_one(y, spec)
    return y.clamp(0.0, 1.0)


def _random_spec(rng: np.random.Generator) -> AugmentationSpec:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind == "contrast":
        params = (float(rng.uniform(*CONTRAST_RANGE)),)
    elif kind == "brightness":
        params = (float(rng.uniform(*BRIGHTNESS_RANGE)),)
    elif kind == "multiplication":
        params = (float(rng.uniform(*MULTIPLIER_RANGE)),)
    else:
        # strictly increasing jittered outputs anchored to [0, 1]
        gaps = rng.uniform(0.05, 1.0, size=MONOTONE_POINTS - 1)
        ys = np.concatenate([[0.0], np.cumsum(gaps)])
        ys /= ys[-1]
        params = tuple(float(v) for v in ys)
    return AugmentationSpec(kind, params)


def sample_specs(rng: np.random.Generator) -> list[AugmentationSpec]:
    """Draw a random composition of 1-3 transforms."""
    depth = int(rng.integers(1, 4))
    return [_random_spec(rng) for _ in range(depth)]


def sample_pretrain_augmentation(
    x: torch.Tensor, rng: np.random.Generator
) -> tuple[torch.Tensor, list[AugmentationSpec]]:
    """Unconstrained draw from the family (no dissimilarity requirement)."""
    specs = sample_specs(rng)
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("pretrain augmentation: %s", [s.describe() for s in specs])
    return apply_augmentation(x, specs), specs


def sample_guided_augmentation(
    x: torch.Tensor,
    threshold: float = DEFAULT_GUIDED_THRESHOLD,
    max_tries: int = DEFAULT_MAX_TRIES,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, list[AugmentationSpec]]:
    """Rejection-sample an augmentation with MSE(x, f(x)) > threshold.

    Raises SamplingFailureError when the try budget is exhausted; callers may
    retry with a lower threshold.
    """
    if threshold < 0:
        raise InvalidArgumentError("threshold must be non-negative")
    if rng is None:
        rng = np.random.default_rng()
    for _ in range(max_tries):
        specs = sample_specs(rng)
        y = apply_augmentation(x, specs)
        mse = float((y - x).pow(2).mean())
        if mse > threshold:
            assert mse > threshold  # postcondition, checked not trusted
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug(
                    "guided augmentation (mse=%.5f): %s", mse, [s.describe() for s in specs]
                )
            return y, specs
    raise SamplingFailureError(
        f"no augmentation exceeded MSE {threshold} within {max_tries} tries"
    )
