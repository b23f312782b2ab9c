#!/usr/bin/env python3
"""Candidate desk config B: smooth flow, weaker theta_init, decayed adaptation."""

import json
import sys
import time
from pathlib import Path

from flowharm.cli import cmd_adapt, cmd_train_flow, cmd_train_harmonizer
from flowharm.checkpoint import load_harmonizer_checkpoint, load_segmenter_checkpoint
from flowharm.config import config_from_dict
from flowharm.data import load_datasets
from flowharm.experiment import ExperimentSetting, run_experiment

OUT = sys.argv[1]
FLOW_EPOCHS = int(sys.argv[2])
HARM_EPOCHS = int(sys.argv[3])
ADAPT_LR = float(sys.argv[4])
STAGES = sys.argv[5] if len(sys.argv) > 5 else "flow,harm,adapt"

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
        "harmonizer": {"epochs": HARM_EPOCHS, "batch_size": 12, "copies_per_image": 4, "decay_period": 40},
        "adaptation": {
            "lr": ADAPT_LR,
            "lr_decay": 0.5,
            "decay_every": 100,
            "max_steps": 300,
            "batch_size": 12,
            "eval_every": 10,
            "criterion": "oracle_best",
        },
    }
)

for stage, fn in (("flow", cmd_train_flow), ("harm", cmd_train_harmonizer), ("adapt", cmd_adapt)):
    if stage in STAGES:
        t0 = time.time()
        fn(cfg, force=True)
        print(f"[{stage}] {time.time() - t0:.0f}s", flush=True)

datasets = {d.domain_id: d for d in load_datasets(cfg.data_dir())}
segmenter = load_segmenter_checkpoint(Path(OUT) / "segmenter" / "segmenter.pt")
targets = sorted(d for d in datasets if d != "site1")
test_dsc = {}
for kind in ("source_bpd", "entropy_plateau", "oracle_best"):
    adapted = {
        t: load_harmonizer_checkpoint(Path(OUT) / "adaptation" / t / f"adapted_{kind}.pt")
        for t in targets
    }
    rep = run_experiment(
        ExperimentSetting("site1", tuple(targets)), datasets, segmenter,
        methods=("adapted",), adapted=adapted,
    )
    dsc, hd = rep.method_average("adapted")
    per = {t: round(rep.scores[("adapted", t)].dsc_mean, 1) for t in targets}
    test_dsc[kind] = dsc
    print(f"criterion {kind}: test DSC {dsc:.2f} HD {hd:.2f} per-site {per}")
print(
    "gaps: bpd %.2f entropy %.2f"
    % (test_dsc["oracle_best"] - test_dsc["source_bpd"], test_dsc["oracle_best"] - test_dsc["entropy_plateau"])
)

pre = load_harmonizer_checkpoint(Path(OUT) / "harmonizer" / "harmonizer_init.pt")
adapted = {
    t: load_harmonizer_checkpoint(Path(OUT) / "adaptation" / t / "adapted_source_bpd.pt")
    for t in targets
}
rep = run_experiment(
    ExperimentSetting("site1", tuple(targets)), datasets, segmenter,
    methods=("baseline", "pretrained", "adapted"), pretrained=pre, adapted=adapted,
)
for m in ("baseline", "pretrained", "adapted"):
    dsc, hd = rep.method_average(m)
    print(f"{m}: DSC {dsc:.2f} HD {hd:.2f}")
for t in targets:
    summary = json.loads((Path(OUT) / "adaptation" / t / "summary.json").read_text())
    stops = {k: (v["step"], round(v.get("dsc", -1), 1)) for k, v in summary["criterion_stops"].items()}
    print(t, "val stops:", stops)
