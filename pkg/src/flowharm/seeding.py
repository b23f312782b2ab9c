"""Seed plumbing: one global seed fans out into independent per-stage streams.

Every source of randomness in the toolkit (parameter init, noise draws,
augmentation sampling, batch shuffling) is fed from an explicit generator
derived here, never from global RNG state, so reruns with the same config
reproduce identical results regardless of what ran before in the process.
"""

from __future__ import annotations

import contextlib

import numpy as np
import torch

# Fixed stream names so child seeds don't depend on call order.
STAGE_STREAMS = (
    "data",
    "flow-init",
    "flow-train",
    "harmonizer-init",
    "harmonizer-train",
    "segmenter-init",
    "segmenter-train",
    "adaptation",
    "evaluation",
)


def child_seed(seed: int, stream: str) -> int:
    """Derive a stable 32-bit child seed for a named stage stream."""
    if stream not in STAGE_STREAMS:
        raise KeyError(f"unknown seed stream: {stream!r}")
    ss = np.random.SeedSequence([seed, STAGE_STREAMS.index(stream)])
    return int(ss.generate_state(1)[0])


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return gen


@contextlib.contextmanager
def seeded_torch(seed: int):
    """Run a block under a seeded global torch RNG, restoring state after.

    Needed for module construction: torch layer initializers draw from the
    global RNG, which this isolates from the surrounding process state.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        yield


def enable_determinism() -> None:
    """Ask torch for deterministic kernels (CPU ops used here all comply)."""
    torch.use_deterministic_algorithms(True)
