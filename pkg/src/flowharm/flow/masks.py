"""Binary partition masks for coupling layers.

A mask selects partition A (value 1, left unchanged and fed to the subnet);
its complement is partition B (value 0, affinely transformed). Checkerboard
masks alternate per spatial position and are shared across channels; channel
masks split the channel axis in half. Parity flips which side is A.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import InvalidArgumentError

MASK_KINDS = ("checkerboard", "channel")


@dataclass(frozen=True)
class CouplingMask:
    """Descriptor of a coupling partition: kind, parity and full shape."""

    kind: str
    parity: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise InvalidArgumentError(f"unknown mask kind {self.kind!r}")
        if self.parity not in (0, 1):
            raise InvalidArgumentError("parity must be 0 or 1")
        if self.kind == "channel" and self.channels < 2:
            raise InvalidArgumentError("channel masking needs at least 2 channels")

    def build(self) -> torch.Tensor:
        """Materialize the (C, H, W) binary mask."""
        if self.kind == "checkerboard":
            ii = torch.arange(self.height).view(-1, 1)
            jj = torch.arange(self.width).view(1, -1)
            board = ((ii + jj) % 2 == self.parity).float()
            return board.expand(self.channels, -1, -1).clone()
        half = self.channels // 2
        chans = torch.zeros(self.channels)
        if self.parity == 0:
            chans[:half] = 1.0
        else:
            chans[half:] = 1.0
        return chans.view(-1, 1, 1).expand(-1, self.height, self.width).clone()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "parity": self.parity,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingMask":
        return cls(**d)


def checkerboard_mask(channels: int, height: int, width: int, parity: int = 0) -> CouplingMask:
    return CouplingMask("checkerboard", parity, channels, height, width)


def channel_mask(channels: int, height: int, width: int, parity: int = 0) -> CouplingMask:
    return CouplingMask("channel", parity, channels, height, width)
