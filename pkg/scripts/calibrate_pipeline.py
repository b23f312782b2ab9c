#!/usr/bin/env python3
"""Desk-scale pipeline calibration: timings and Table orderings."""

import json
import sys
import time
from pathlib import Path

from flowharm.checkpoint import load_harmonizer_checkpoint, load_segmenter_checkpoint
from flowharm.cli import (
    cmd_adapt,
    cmd_evaluate,
    cmd_synth_data,
    cmd_train_flow,
    cmd_train_harmonizer,
    cmd_train_segmenter,
)
from flowharm.config import config_from_dict
from flowharm.data import load_datasets
from flowharm.experiment import ExperimentSetting, run_experiment

OUT = sys.argv[1] if len(sys.argv) > 1 else "/tmp/calib_run"
ADAPT_LR = float(sys.argv[2]) if len(sys.argv) > 2 else 3e-4
ADAPT_STEPS = int(sys.argv[3]) if len(sys.argv) > 3 else 300
FLOW_EPOCHS = int(sys.argv[4]) if len(sys.argv) > 4 else 150

cfg = config_from_dict(
    {
        "seed": 7,
        "deterministic": True,
        "out_dir": OUT,
        "data": {"n_sites": 4, "n_images": 20, "height": 64, "width": 64, "n_classes": 6},
        "flow": {
            "epochs": FLOW_EPOCHS,
            "batch_size": 12,
            "lr": 1e-3,
            "decay_period": 100,
            "margin_c": 16.0,
            "arch": {
                "vardeq_couplings": 2,
                "couplings_per_block": [2, 2, 2],
                "subnet_width": 12,
                "subnet_levels": 2,
            },
        },
        "harmonizer": {"epochs": 80, "batch_size": 12, "copies_per_image": 4, "decay_period": 40},
        "segmenter": {"epochs": 150, "batch_size": 4, "lr": 4e-3, "decay_period": 60},
        "adaptation": {
            "lr": ADAPT_LR,
            "max_steps": ADAPT_STEPS,
            "batch_size": 12,
            "eval_every": 10,
            "criterion": "oracle_best",
        },
    }
)

stages = [
    ("synth", cmd_synth_data),
    ("flow", cmd_train_flow),
    ("harmonizer", cmd_train_harmonizer),
    ("segmenter", cmd_train_segmenter),
    ("adapt", cmd_adapt),
    ("evaluate", cmd_evaluate),
]
t_all = time.time()
for name, fn in stages:
    t0 = time.time()
    rc = fn(cfg, force=True)
    print(f"[{name}] rc={rc} {time.time() - t0:.0f}s", flush=True)
print(f"TOTAL {time.time() - t_all:.0f}s")

# criterion comparison on the test split
datasets = {d.domain_id: d for d in load_datasets(cfg.data_dir())}
segmenter = load_segmenter_checkpoint(Path(OUT) / "segmenter" / "segmenter.pt")
targets = [d for d in datasets if d != "site1"]
for kind in ("source_bpd", "entropy_plateau", "oracle_best"):
    adapted = {
        t: load_harmonizer_checkpoint(Path(OUT) / "adaptation" / t / f"adapted_{kind}.pt")
        for t in targets
    }
    report = run_experiment(
        ExperimentSetting("site1", tuple(targets)),
        datasets,
        segmenter,
        methods=("adapted",),
        adapted=adapted,
    )
    dsc, hd = report.method_average("adapted")
    print(f"criterion {kind}: test DSC {dsc:.2f} HD {hd:.2f}")

for t in targets:
    summary = json.loads((Path(OUT) / "adaptation" / t / "summary.json").read_text())
    stops = {k: (v["step"], round(v.get("dsc", -1), 1)) for k, v in summary["criterion_stops"].items()}
    print(t, "stops:", stops)
