"""Versioned checkpoint containers and parameter checksums.

Every checkpoint is a self-describing dict: a format tag, a version, the
architecture configuration and the parameters. Loading validates the tag and
the architecture against the receiving model; a mismatch is an error rather
than a silent partial load.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .errors import IntegrityError, MissingArtifactError
from .flow import FlowArchitecture, FlowModel, build_flow
from .harmonizer import HarmonizerNet

FORMAT_FLOW = "flowharm-flow-v1"
FORMAT_HARMONIZER = "flowharm-harmonizer-v1"
FORMAT_SEGMENTER = "flowharm-segmenter-v1"


def state_dict_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over parameter names and raw tensor bytes (order-stable)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _load_container(path: Path, expected_format: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    tag = payload.get("format")
    if tag != expected_format:
        raise IntegrityError(
            f"{path} holds format {tag!r}, expected {expected_format!r}"
        )
    return payload


def save_flow_checkpoint(path: Path, model: FlowModel, arch: FlowArchitecture) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": FORMAT_FLOW,
            "version": 1,
            "arch": arch.to_dict(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_flow_checkpoint(path: Path) -> tuple[FlowModel, FlowArchitecture]:
    payload = _load_container(path, FORMAT_FLOW)
    arch = FlowArchitecture.from_dict(payload["arch"])
    model = build_flow(arch, seed=0)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as err:
        raise IntegrityError(f"{path}: architecture mismatch: {err}") from err
    return model, arch


def save_harmonizer_checkpoint(path: Path, net: HarmonizerNet) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": FORMAT_HARMONIZER,
            "version": 1,
            "arch": {"widths": list(net.widths)},
            "state_dict": net.state_dict(),
        },
        path,
    )


def load_harmonizer_checkpoint(path: Path) -> HarmonizerNet:
    payload = _load_container(path, FORMAT_HARMONIZER)
    net = HarmonizerNet(widths=tuple(payload["arch"]["widths"]))
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as err:
        raise IntegrityError(f"{path}: architecture mismatch: {err}") from err
    return net


def save_segmenter_checkpoint(path: Path, net) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": FORMAT_SEGMENTER,
            "version": 1,
            "arch": {"widths": list(net.widths), "num_classes": net.num_classes},
            "state_dict": net.state_dict(),
        },
        path,
    )


def load_segmenter_checkpoint(path: Path):
    from .segmentation import SegmentationNet

    payload = _load_container(path, FORMAT_SEGMENTER)
    net = SegmentationNet(
        num_classes=payload["arch"]["num_classes"],
        widths=tuple(payload["arch"]["widths"]),
    )
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as err:
        raise IntegrityError(f"{path}: architecture mismatch: {err}") from err
    return net
