"""Declarative run configuration: one YAML file drives every stage.

Unknown keys are rejected by name; command-line flags override file values.
Stage seeds are derived from the single global seed, so any two stages are
independent of each other's execution order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULT_METHODS = ("baseline", "pretrained", "adapted")


def _from_dict(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {path or 'root'} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key: {path + key!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            val = raw[f.name]
            nested = _SECTION_TYPES.get((cls, f.name))
            if nested is not None and val is not None:
                val = _from_dict(nested, val, f"{path}{f.name}.")
            if isinstance(val, list) and f.name in _TUPLE_FIELDS:
                val = tuple(val)
            kwargs[f.name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid value in section {path or 'root'}: {err}") from err


@dataclass
class DataSection:
    dir: str | None = None  # defaults to <out_dir>/data
    n_sites: int = 4
    n_images: int = 20
    height: int = 64
    width: int = 64
    n_classes: int = 6
    export_png: bool = False


@dataclass
class FlowArchSection:
    vardeq_couplings: int = 4
    couplings_per_block: tuple[int, int, int] = (4, 4, 4)
    subnet_width: int = 32
    subnet_levels: int = 4
    subnet_width_cap: int = 128
    scale_bound: float = 3.0


@dataclass
class FlowSection:
    epochs: int = 1600
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_period: int = 200
    batch_size: int = 32
    margin_c: float = 1.2
    margin_in_nats: bool = False
    aug_fraction: float = 0.25
    guided: bool = True
    guided_threshold: float = 0.01
    guided_max_tries: int = 50
    grad_clip: float = 100.0
    arch: FlowArchSection = field(default_factory=FlowArchSection)


@dataclass
class HarmonizerSection:
    epochs: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_period: int = 30
    batch_size: int = 32
    copies_per_image: int = 4


@dataclass
class SegmenterSection:
    epochs: int = 200
    lr: float = 4e-3
    lr_decay: float = 0.5
    decay_period: int = 30
    batch_size: int = 32


@dataclass
class AdaptationSection:
    lr: float = 1e-4
    lr_decay: float = 0.5
    decay_every: int = 100
    max_steps: int = 300
    batch_size: int = 12
    eval_every: int = 10
    grad_clip: float = 2.0
    criterion: str = "source_bpd"
    window: int = 5
    tolerance: float = 1e-3
    slack: float = 0.02
    fixed_steps: int = 0


@dataclass
class EvaluationSection:
    source: str = "site1"
    methods: tuple[str, ...] = DEFAULT_METHODS
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    flow: FlowSection = field(default_factory=FlowSection)
    harmonizer: HarmonizerSection = field(default_factory=HarmonizerSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def data_dir(self) -> Path:
        return Path(self.data.dir) if self.data.dir else Path(self.out_dir) / "data"

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "flow"): FlowSection,
    (RunConfig, "harmonizer"): HarmonizerSection,
    (RunConfig, "segmenter"): SegmenterSection,
    (RunConfig, "adaptation"): AdaptationSection,
    (RunConfig, "evaluation"): EvaluationSection,
    (FlowSection, "arch"): FlowArchSection,
}

_TUPLE_FIELDS = {"couplings_per_block", "methods"}


def config_from_dict(raw: dict) -> RunConfig:
    return _from_dict(RunConfig, raw or {}, "")


def load_config(path: str | Path | None) -> RunConfig:
    """Load YAML config; a missing path yields all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return config_from_dict(raw)


def save_config(config: RunConfig, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
