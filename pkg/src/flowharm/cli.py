"""Command-line entry point.

Stages: synth-data, train-flow, train-harmonizer, train-segmenter, adapt,
evaluate. Each command reads one declarative YAML config (flags override file
values), writes its artifacts under the run's output directory and never
mutates upstream checkpoints. Flow training and harmonizer pretraining are
independent and may run in either order.

Exit codes: 0 success, 2 config error, 3 missing artifact / integrity
failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .adaptation import AdaptConfig, StoppingCriterion, adapt
from .config import RunConfig, load_config, save_config
from .data import load_datasets, save_datasets
from .errors import (
    EXIT_CONFIG,
    EXIT_MISSING_ARTIFACT,
    EXIT_NUMERIC,
    EXIT_OK,
    ConfigError,
    IntegrityError,
    InvalidArgumentError,
    MissingArtifactError,
    NumericFailureError,
)
from .experiment import ExperimentSetting, run_experiment
from .flow import FlowArchitecture
from .flow_train import FlowTrainConfig, train_flow
from .harmonizer import HarmonizerTrainConfig, pretrain_harmonizer
from .seeding import child_seed, enable_determinism
from .segmentation import SegmenterTrainConfig, train_segmenter
from .synth import build_sites


def _prepare(config: RunConfig) -> None:
    if config.deterministic:
        enable_determinism()
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    save_config(config, Path(config.out_dir) / "config_used.yaml")


def _source_dataset(config: RunConfig, datasets):
    by_id = {d.domain_id: d for d in datasets}
    source = config.evaluation.source
    if source not in by_id:
        raise ConfigError(f"source domain {source!r} not present in dataset")
    return by_id[source], by_id


def _target_ids(config: RunConfig, by_id) -> list[str]:
    return [d for d in by_id if d != config.evaluation.source]


def _flow_arch(config: RunConfig) -> FlowArchitecture:
    a = config.flow.arch
    return FlowArchitecture(
        height=config.data.height,
        width=config.data.width,
        vardeq_couplings=a.vardeq_couplings,
        couplings_per_block=tuple(a.couplings_per_block),
        subnet_width=a.subnet_width,
        subnet_levels=a.subnet_levels,
        subnet_width_cap=a.subnet_width_cap,
        scale_bound=a.scale_bound,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(config: RunConfig, force: bool = False) -> int:
    _prepare(config)
    data_dir = config.data_dir()
    if data_dir.exists() and any(data_dir.iterdir()) and not force:
        raise ConfigError(f"output dir {data_dir} is not empty (use --force to overwrite)")
    sites = build_sites(
        seed=child_seed(config.seed, "data"),
        n_sites=config.data.n_sites,
        n_images=config.data.n_images,
        height=config.data.height,
        width=config.data.width,
        n_classes=config.data.n_classes,
    )
    save_datasets(sites, data_dir, export_png=config.data.export_png)
    print(f"wrote {len(sites)} sites to {data_dir}")
    return EXIT_OK


def cmd_train_flow(config: RunConfig, force: bool = False) -> int:
    _prepare(config)
    datasets = load_datasets(config.data_dir())
    source, _ = _source_dataset(config, datasets)
    out = Path(config.out_dir) / "flow"
    f = config.flow
    train_cfg = FlowTrainConfig(
        epochs=f.epochs,
        lr=f.lr,
        lr_decay=f.lr_decay,
        decay_period=f.decay_period,
        batch_size=f.batch_size,
        margin_c=f.margin_c,
        margin_in_nats=f.margin_in_nats,
        aug_fraction=f.aug_fraction,
        guided=f.guided,
        guided_threshold=f.guided_threshold,
        guided_max_tries=f.guided_max_tries,
        grad_clip=f.grad_clip,
        seed=child_seed(config.seed, "flow-train"),
        arch=_flow_arch(config),
    )
    result = train_flow(source, train_cfg, out_dir=out)
    ckpt.save_flow_checkpoint(out / "flow_final.pt", result.model, result.arch)
    summary = {
        "source_bpd_ref": result.source_bpd_ref,
        "epochs": f.epochs,
        "final_val_bpd": result.log[-1].get("val_bpd") if result.log else None,
        "checksum": ckpt.state_dict_checksum(result.model),
    }
    (out / "flow_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"flow trained: source_bpd_ref={result.source_bpd_ref:.4f} -> {out}")
    return EXIT_OK


def cmd_train_harmonizer(config: RunConfig, force: bool = False) -> int:
    _prepare(config)
    datasets = load_datasets(config.data_dir())
    source, _ = _source_dataset(config, datasets)
    out = Path(config.out_dir) / "harmonizer"
    h = config.harmonizer
    train_cfg = HarmonizerTrainConfig(
        epochs=h.epochs,
        lr=h.lr,
        lr_decay=h.lr_decay,
        decay_period=h.decay_period,
        batch_size=h.batch_size,
        copies_per_image=h.copies_per_image,
        seed=child_seed(config.seed, "harmonizer-train"),
    )
    net, log = pretrain_harmonizer(source, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_harmonizer_checkpoint(out / "harmonizer_init.pt", net)
    with (out / "harmonizer_train_log.jsonl").open("w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")
    summary = {
        "epochs": h.epochs,
        "final_val_mse": log[-1].get("val_mse") if log else None,
        "checksum": ckpt.state_dict_checksum(net),
    }
    (out / "harmonizer_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"harmonizer pretrained -> {out}")
    return EXIT_OK


def cmd_train_segmenter(config: RunConfig, force: bool = False) -> int:
    _prepare(config)
    datasets = load_datasets(config.data_dir())
    source, _ = _source_dataset(config, datasets)
    out = Path(config.out_dir) / "segmenter"
    s = config.segmenter
    train_cfg = SegmenterTrainConfig(
        epochs=s.epochs,
        lr=s.lr,
        lr_decay=s.lr_decay,
        decay_period=s.decay_period,
        batch_size=s.batch_size,
        seed=child_seed(config.seed, "segmenter-train"),
    )
    net, log = train_segmenter(source, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_segmenter_checkpoint(out / "segmenter.pt", net)
    with (out / "segmenter_train_log.jsonl").open("w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")
    summary = {
        "epochs": s.epochs,
        "final_val_dsc": log[-1].get("val_dsc") if log else None,
        "checksum": ckpt.state_dict_checksum(net),
    }
    (out / "segmenter_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"segmenter trained (val DSC {summary['final_val_dsc']}) -> {out}")
    return EXIT_OK


def cmd_adapt(config: RunConfig, force: bool = False) -> int:
    _prepare(config)
    datasets = load_datasets(config.data_dir())
    _, by_id = _source_dataset(config, datasets)
    out_root = Path(config.out_dir)

    flow, _ = ckpt.load_flow_checkpoint(out_root / "flow" / "flow_final.pt")
    flow_summary = json.loads((out_root / "flow" / "flow_summary.json").read_text())
    harmonizer = ckpt.load_harmonizer_checkpoint(
        out_root / "harmonizer" / "harmonizer_init.pt"
    )

    a = config.adaptation
    criterion = StoppingCriterion(
        kind=a.criterion,
        window=a.window,
        tolerance=a.tolerance,
        slack=a.slack,
        steps=a.fixed_steps,
    )
    segmenter = None
    if criterion.kind in ("entropy_plateau", "oracle_best"):
        segmenter = ckpt.load_segmenter_checkpoint(out_root / "segmenter" / "segmenter.pt")

    flow_checksum_before = ckpt.state_dict_checksum(flow)
    adapt_cfg = AdaptConfig(
        lr=a.lr,
        lr_decay=a.lr_decay,
        decay_every=a.decay_every,
        max_steps=a.max_steps,
        batch_size=a.batch_size,
        eval_every=a.eval_every,
        grad_clip=a.grad_clip,
        seed=child_seed(config.seed, "adaptation"),
    )
    for domain in _target_ids(config, by_id):
        result = adapt(
            harmonizer,
            flow,
            by_id[domain],
            criterion,
            config=adapt_cfg,
            segmenter=segmenter,
            source_bpd_ref=flow_summary["source_bpd_ref"],
            record_dsc=criterion.kind == "oracle_best",
        )
        dom_dir = out_root / "adaptation" / domain
        dom_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save_harmonizer_checkpoint(dom_dir / "adapted.pt", result.net)
        with (dom_dir / "trace.jsonl").open("w") as fh:
            for rec in result.trace:
                fh.write(json.dumps(rec) + "\n")
        summary = {
            "criterion": a.criterion,
            "stopped_step": result.stopped_step,
            "fired": result.fired,
            "source_bpd_ref": flow_summary["source_bpd_ref"],
        }
        if criterion.kind == "oracle_best":
            # one full-budget run answers where every criterion would stop;
            # persist those parameter states for side-by-side evaluation
            from .adaptation import select_stop_record

            stops = {}
            for kind in ("source_bpd", "entropy_plateau", "oracle_best"):
                crit = StoppingCriterion(
                    kind=kind, window=a.window, tolerance=a.tolerance, slack=a.slack
                )
                rec = select_stop_record(
                    result.trace, crit, source_bpd_ref=flow_summary["source_bpd_ref"]
                )
                stops[kind] = rec
                ckpt.save_harmonizer_checkpoint(
                    dom_dir / f"adapted_{kind}.pt", result.net_at(rec["step"])
                )
            summary["criterion_stops"] = stops
        (dom_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        print(f"adapted {domain}: stopped at step {result.stopped_step} (fired={result.fired})")
    if ckpt.state_dict_checksum(flow) != flow_checksum_before:
        raise IntegrityError("flow parameters changed during adaptation")
    return EXIT_OK


def cmd_evaluate(config: RunConfig, force: bool = False) -> int:
    _prepare(config)
    datasets = load_datasets(config.data_dir())
    _, by_id = _source_dataset(config, datasets)
    out_root = Path(config.out_dir)

    segmenter = ckpt.load_segmenter_checkpoint(out_root / "segmenter" / "segmenter.pt")
    seg_summary = json.loads((out_root / "segmenter" / "segmenter_summary.json").read_text())
    if ckpt.state_dict_checksum(segmenter) != seg_summary["checksum"]:
        raise IntegrityError("segmenter checkpoint does not match its recorded checksum")

    methods = tuple(config.evaluation.methods)
    pretrained = None
    if "pretrained" in methods or "adapted" in methods:
        pretrained = ckpt.load_harmonizer_checkpoint(
            out_root / "harmonizer" / "harmonizer_init.pt"
        )
    targets = _target_ids(config, by_id)
    adapted = {}
    if "adapted" in methods:
        for domain in targets:
            path = out_root / "adaptation" / domain / "adapted.pt"
            adapted[domain] = ckpt.load_harmonizer_checkpoint(path)

    setting = ExperimentSetting(source=config.evaluation.source, targets=tuple(targets))
    report = run_experiment(
        setting,
        by_id,
        segmenter,
        methods=methods,
        pretrained=pretrained,
        adapted=adapted,
        split=config.evaluation.split,
    )
    eval_dir = out_root / "evaluation"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.json").write_text(report.to_json())
    table = report.format_table()
    (eval_dir / "report.txt").write_text(table)
    print(table)
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-flow": cmd_train_flow,
    "train-harmonizer": cmd_train_harmonizer,
    "train-segmenter": cmd_train_segmenter,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowharm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override global seed")
        p.add_argument("--out", type=str, default=None, help="override output directory")
        p.add_argument("--data-dir", type=str, default=None, help="override dataset directory")
        p.add_argument("--deterministic", action="store_true", help="bitwise-reproducible mode")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        # flags win over file values
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.out_dir = args.out
        if args.data_dir is not None:
            config.data.dir = args.data_dir
        if args.deterministic:
            config.deterministic = True
        return COMMANDS[args.command](config, force=args.force)
    except (ConfigError, InvalidArgumentError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, IntegrityError) as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except NumericFailureError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
