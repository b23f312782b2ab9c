"""Core data containers and intensity conventions.

Images move through the pipeline in two representations:

* discrete: integer tensors with values in [0, 255] (256 quantization levels),
  the storage form of every dataset;
* continuous: floats in (0, 1), obtained as ``(k + 0.5) / 256`` (the center of
  each quantization cell). This is the form consumed by the harmonizer, the
  augmentations and the segmenter, and the space in which the flow's
  continuous density lives.

``quantize`` maps continuous intensities back onto the 256-level grid and is
idempotent: quantizing an already-quantized image is a no-op.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgumentError

QUANT_LEVELS = 256

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = {"train": 0.60, "val": 0.15, "test": 0.25}


@dataclass
class ImageBatch:
    """Batched single-channel images of shape (B, 1, H, W).

    ``discrete`` marks integer-valued data in [0, 255]. Spatial dims must be
    divisible by 4 (two squeeze stages of factor 2 in the standard flow).
    """

    data: torch.Tensor
    discrete: bool = False

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 1:
            raise InvalidArgumentError(
                f"ImageBatch expects shape (B, 1, H, W), got {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise InvalidArgumentError("ImageBatch contains non-finite values")
        if self.discrete:
            if not torch.equal(self.data, self.data.round()):
                raise InvalidArgumentError("discrete ImageBatch must hold integer values")
            if self.data.min() < 0 or self.data.max() > QUANT_LEVELS - 1:
                raise InvalidArgumentError("discrete ImageBatch values must lie in [0, 255]")
        h, w = self.data.shape[2], self.data.shape[3]
        if h % 4 or w % 4:
            raise InvalidArgumentError(f"H and W must be divisible by 4, got {h}x{w}")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def num_elements(self) -> int:
        """Elements per sample, |Omega|."""
        return int(self.data[0].numel())

    def to_continuous(self) -> "ImageBatch":
        """Cell-center continuous form: (k + 0.5)/256, strictly inside (0, 1)."""
        if not self.discrete:
            return self
        return ImageBatch((self.data.float() + 0.5) / QUANT_LEVELS, discrete=False)


def to_continuous(data: torch.Tensor) -> torch.Tensor:
    """Tensor-level cell-center conversion of integer intensities."""
    return (data.float() + 0.5) / QUANT_LEVELS


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap continuous intensities in [0, 1] to the 256-level grid (uint8).

    Cell k covers [k/256, (k+1)/256); values at or above 1 land in cell 255.
    """
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * QUANT_LEVELS), 0, QUANT_LEVELS - 1).astype(np.uint8)


def quantize_tensor(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(torch.floor(x * QUANT_LEVELS), 0, QUANT_LEVELS - 1)


@dataclass
class LabelMask:
    """Integer segmentation mask (H, W) with values in [0, K-1]."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise InvalidArgumentError(f"LabelMask expects shape (H, W), got {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise InvalidArgumentError("LabelMask must hold integers")
        if self.data.min() < 0 or self.data.max() >= self.num_classes:
            raise InvalidArgumentError(
                f"LabelMask values must lie in [0, {self.num_classes - 1}]"
            )


@dataclass
class DomainDataset:
    """Images + masks + split assignment for one imaging site.

    Images are stored discrete (uint8 arrays H x W); masks are aligned 1:1.
    ``provenance`` records the generator seed and shift parameters.
    """

    domain_id: str
    images: list[np.ndarray]
    masks: list[np.ndarray]
    num_classes: int
    split: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.masks) or len(self.images) != len(self.split):
            raise InvalidArgumentError("images, masks and split must align 1:1")
        for s in self.split:
            if s not in SPLITS:
                raise InvalidArgumentError(f"unknown split tag {s!r}")

    def __len__(self) -> int:
        return len(self.images)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]

    def image_batch(self, split: str) -> ImageBatch:
        """Stack one split's images into a discrete ImageBatch."""
        idx = self.indices(split)
        if not idx:
            raise InvalidArgumentError(f"split {split!r} of domain {self.domain_id} is empty")
        arr = np.stack([self.images[i] for i in idx]).astype(np.float32)[:, None]
        return ImageBatch(torch.from_numpy(arr), discrete=True)

    def mask_batch(self, split: str) -> torch.Tensor:
        idx = self.indices(split)
        if not idx:
            raise InvalidArgumentError(f"split {split!r} of domain {self.domain_id} is empty")
        return torch.from_numpy(np.stack([self.masks[i] for i in idx]).astype(np.int64))


def assign_splits(n: int, rng: np.random.Generator) -> list[str]:
    """60/15/25 split assignment, proportions exact within one item."""
    n_train = int(round(n * SPLIT_FRACTIONS["train"]))
    n_val = int(round(n * SPLIT_FRACTIONS["val"]))
    n_test = n - n_train - n_val
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    perm = rng.permutation(n)
    out = [""] * n
    for tag, i in zip(tags, perm):
        out[int(i)] = tag
    return out


# ---------------------------------------------------------------------------
# Dataset directory persistence
# ---------------------------------------------------------------------------

def save_datasets(datasets: list[DomainDataset], root: Path, export_png: bool = False) -> None:
    """Persist sites as one folder each: arrays in .npz plus a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "flowharm-dataset", "version": 1, "sites": []}
    for ds in datasets:
        site_dir = root / ds.domain_id
        site_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            site_dir / "arrays.npz",
            images=np.stack(ds.images),
            masks=np.stack(ds.masks),
        )
        site_entry = {
            "domain_id": ds.domain_id,
            "num_classes": ds.num_classes,
            "split": ds.split,
            "provenance": ds.provenance,
        }
        manifest["sites"].append(site_entry)
        if export_png:
            from PIL import Image

            png_dir = site_dir / "png"
            png_dir.mkdir(exist_ok=True)
            for i, img in enumerate(ds.images):
                Image.fromarray(img, mode="L").save(png_dir / f"img_{i:03d}.png")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_datasets(root: Path) -> list[DomainDataset]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        from .errors import MissingArtifactError

        raise MissingArtifactError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    out = []
    for entry in manifest["sites"]:
        arrays = np.load(root / entry["domain_id"] / "arrays.npz")
        out.append(
            DomainDataset(
                domain_id=entry["domain_id"],
                images=list(arrays["images"]),
                masks=list(arrays["masks"]),
                num_classes=entry["num_classes"],
                split=list(entry["split"]),
                provenance=entry.get("provenance", {}),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Thin optional NIfTI-1 reader (no preprocessing; coronal slice extraction only)
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64, 256: np.int8, 512: np.uint16}


def load_nifti(path: Path) -> np.ndarray:
    """Minimal NIfTI-1 volume loader (.nii or .nii.gz), returning raw voxels.

    Only single-file NIfTI-1 with scalar dtypes is supported; no orientation
    handling or intensity preprocessing is performed.
    """
    path = Path(path)
    raw = gzip.open(path, "rb").read() if path.suffix == ".gz" else path.read_bytes()
    if len(raw) < 352:
        raise InvalidArgumentError(f"{path}: too short for a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != 348:
        raise InvalidArgumentError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    datatype = struct.unpack_from("<h", raw, 70)[0]
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    if datatype not in _NIFTI_DTYPES:
        raise InvalidArgumentError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dt = _NIFTI_DTYPES[datatype]
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset)
    return data.reshape(shape[::-1]).transpose(range(ndim - 1, -1, -1))


def nifti_coronal_slices(volume: np.ndarray, n_slices: int) -> list[np.ndarray]:
    """Evenly spaced 2D coronal (second-axis) slices, quantized to 256 levels."""
    if volume.ndim != 3:
        raise InvalidArgumentError("expected a 3D volume")
    ys = np.linspace(0, volume.shape[1] - 1, n_slices).round().astype(int)
    out = []
    lo, hi = float(volume.min()), float(volume.max())
    scale = (hi - lo) if hi > lo else 1.0
    for y in ys:
        sl = (volume[:, y, :].astype(np.float64) - lo) / scale
        out.append(quantize(sl))
    return out
