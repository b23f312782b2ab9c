"""Cross-domain experiment runner: harmonize, segment, aggregate metrics.

Produces a report shaped like the evaluation tables: one row per method
(baseline / pretrained / adapted), one column per target domain plus the
average, a DSC block and an HD block. The segmenter is frozen: the runner
checksums its parameters before and after and refuses to continue on drift.
Per-image metric evaluation is pure and independent across images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import state_dict_checksum
from .data import DomainDataset
from .errors import ConfigError, IntegrityError
from .harmonizer import HarmonizerNet
from .metrics import per_image_scores
from .segmentation import SegmentationNet

METHODS = ("baseline", "pretrained", "adapted")


@dataclass(frozen=True)
class ExperimentSetting:
    """One cross-domain setting: a source site and its target sites."""

    source: str
    targets: tuple[str, ...]


@dataclass
class MethodDomainScores:
    dsc_mean: float
    dsc_std: float
    hd_mean: float
    hd_std: float
    n_images: int
    per_class_dsc: dict[int, float] = field(default_factory=dict)
    per_class_hd: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dsc_mean": self.dsc_mean,
            "dsc_std": self.dsc_std,
            "hd_mean": self.hd_mean,
            "hd_std": self.hd_std,
            "n_images": self.n_images,
            "per_class_dsc": {str(k): v for k, v in self.per_class_dsc.items()},
            "per_class_hd": {str(k): v for k, v in self.per_class_hd.items()},
        }


@dataclass
class MetricsReport:
    setting: ExperimentSetting
    scores: dict[tuple[str, str], MethodDomainScores]  # (method, domain) -> scores

    def methods(self) -> list[str]:
        return sorted({m for m, _ in self.scores}, key=lambda m: METHODS.index(m) if m in METHODS else 99)

    def domains(self) -> list[str]:
        return sorted({d for _, d in self.scores})

    def method_average(self, method: str) -> tuple[float, float]:
        """Mean DSC and mean HD across this method's domains."""
        entries = [v for (m, _), v in self.scores.items() if m == method]
        return (
            float(np.mean([e.dsc_mean for e in entries])),
            float(np.mean([e.hd_mean for e in entries])),
        )

    def to_dict(self) -> dict:
        return {
            "setting": {"source": self.setting.source, "targets": list(self.setting.targets)},
            "scores": {
                f"{m}/{d}": v.to_dict() for (m, d), v in sorted(self.scores.items())
            },
            "averages": {
                m: {"dsc": self.method_average(m)[0], "hd": self.method_average(m)[1]}
                for m in self.methods()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        """Text table: method rows x domain columns, DSC block then HD block."""
        domains = self.domains()
        header = ["method"] + domains + ["average"]
        lines = [f"setting: {self.setting.source} -> {', '.join(self.setting.targets)}", ""]
        for block, attr_mean, attr_std, fmt in (
            ("DSC (%)", "dsc_mean", "dsc_std", "{:.1f}±{:.1f}"),
            ("HD (px)", "hd_mean", "hd_std", "{:.2f}±{:.2f}"),
        ):
            lines.append(block)
            lines.append(" | ".join(f"{h:>16}" for h in header))
            for m in self.methods():
                cells = [f"{m:>16}"]
                for d in domains:
                    s = self.scores[(m, d)]
                    cells.append(f"{fmt.format(getattr(s, attr_mean), getattr(s, attr_std)):>16}")
                avg_dsc, avg_hd = self.method_average(m)
                avg = avg_dsc if attr_mean == "dsc_mean" else avg_hd
                cells.append(f"{avg:>16.2f}")
                lines.append(" | ".join(cells))
            lines.append("")
        return "\n".join(lines)


def _evaluate_method(
    images: torch.Tensor,
    masks: torch.Tensor,
    num_classes: int,
    segmenter: SegmentationNet,
    harmonizer: HarmonizerNet | None,
) -> MethodDomainScores:
    with torch.no_grad():
        x = images if harmonizer is None else harmonizer(images)
        preds = segmenter.predict(x)
    dscs, hds = [], []
    class_dsc: dict[int, list[float]] = {}
    class_hd: dict[int, list[float]] = {}
    for i in range(images.shape[0]):
        mean_dsc, mean_hd, pc_dsc, pc_hd = per_image_scores(
            preds[i].numpy(), masks[i].numpy(), num_classes
        )
        dscs.append(mean_dsc)
        hds.append(mean_hd)
        for k, v in pc_dsc.items():
            class_dsc.setdefault(k, []).append(v)
        for k, v in pc_hd.items():
            class_hd.setdefault(k, []).append(v)
    return MethodDomainScores(
        dsc_mean=float(np.mean(dscs)),
        dsc_std=float(np.std(dscs)),
        hd_mean=float(np.mean(hds)),
        hd_std=float(np.std(hds)),
        n_images=images.shape[0],
        per_class_dsc={k: float(np.mean(v)) for k, v in class_dsc.items()},
        per_class_hd={k: float(np.mean(v)) for k, v in class_hd.items()},
    )


def run_experiment(
    setting: ExperimentSetting,
    datasets: dict[str, DomainDataset],
    segmenter: SegmentationNet,
    methods: tuple[str, ...] = METHODS,
    pretrained: HarmonizerNet | None = None,
    adapted: dict[str, HarmonizerNet] | None = None,
    split: str = "test",
) -> MetricsReport:
    """Evaluate each method on each target domain's held-out split."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    if "pretrained" in methods and pretrained is None:
        raise ConfigError("method 'pretrained' requested but no pretrained harmonizer given")
    if "adapted" in methods and not adapted:
        raise ConfigError("method 'adapted' requested but no adapted harmonizers given")

    checksum_before = state_dict_checksum(segmenter)
    scores: dict[tuple[str, str], MethodDomainScores] = {}
    for domain in setting.targets:
        if domain not in datasets:
            raise ConfigError(f"dataset for domain {domain!r} is missing")
        ds = datasets[domain]
        images = ds.image_batch(split).to_continuous().data
        masks = ds.mask_batch(split)
        for method in methods:
            if method == "baseline":
                harmonizer = None
            elif method == "pretrained":
                harmonizer = pretrained
            else:
                if domain not in adapted:
                    raise ConfigError(f"no adapted harmonizer for domain {domain!r}")
                harmonizer = adapted[domain]
            scores[(method, domain)] = _evaluate_method(
                images, masks, ds.num_classes, segmenter, harmonizer
            )
    if state_dict_checksum(segmenter) != checksum_before:
        raise IntegrityError("segmenter parameters changed during evaluation")
    return MetricsReport(setting=setting, scores=scores)
