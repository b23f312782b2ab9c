import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from flowharm.checkpoint import state_dict_checksum, load_flow_checkpoint, load_harmonizer_checkpoint
from flowharm.cli import (
    cmd_adapt,
    cmd_evaluate,
    cmd_synth_data,
    cmd_train_flow,
    cmd_train_harmonizer,
    cmd_train_segmenter,
    main,
)
from flowharm.config import config_from_dict


def tiny_config(out_dir, **overrides):
    raw = {
        "seed": 3,
        "deterministic": True,
        "out_dir": str(out_dir),
        "data": {"n_sites": 2, "n_images": 8, "height": 32, "width": 32, "n_classes": 6},
        "flow": {
            "epochs": 2,
            "batch_size": 4,
            "decay_period": 2,
            "margin_c": 16.0,
            "arch": {
                "vardeq_couplings": 1,
                "couplings_per_block": [1, 1, 1],
                "subnet_width": 4,
                "subnet_levels": 1,
            },
        },
        "harmonizer": {"epochs": 1, "batch_size": 4, "copies_per_image": 1},
        "segmenter": {"epochs": 2, "batch_size": 4},
        "adaptation": {"max_steps": 4, "batch_size": 4, "eval_every": 2, "criterion": "fixed_steps", "fixed_steps": 4},
        "evaluation": {"methods": ["baseline", "pretrained", "adapted"]},
    }
    for key, val in overrides.items():
        section = raw.setdefault(key, {})
        if isinstance(val, dict):
            section.update(val)
        else:
            raw[key] = val
    return raw


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clirun")
    cfg = config_from_dict(tiny_config(out))
    assert cmd_synth_data(cfg) == 0
    assert cmd_train_flow(cfg) == 0
    assert cmd_train_harmonizer(cfg) == 0
    assert cmd_train_segmenter(cfg) == 0
    assert cmd_adapt(cfg) == 0
    assert cmd_evaluate(cfg) == 0
    return out, cfg


def test_pipeline_produces_expected_artifacts(pipeline_dir):
    out, _ = pipeline_dir
    assert (out / "data" / "manifest.json").exists()
    assert (out / "flow" / "flow_final.pt").exists()
    assert (out / "flow" / "flow_summary.json").exists()
    assert (out / "harmonizer" / "harmonizer_init.pt").exists()
    assert (out / "segmenter" / "segmenter.pt").exists()
    assert (out / "adaptation" / "site2" / "adapted.pt").exists()
    assert (out / "adaptation" / "site2" / "trace.jsonl").exists()
    report = json.loads((out / "evaluation" / "report.json").read_text())
    assert "baseline/site2" in report["scores"]
    table = (out / "evaluation" / "report.txt").read_text()
    assert "DSC (%)" in table


def test_synth_refuses_nonempty_without_force(pipeline_dir):
    out, _ = pipeline_dir
    rc = main(["synth-data", "--out", str(out)])
    assert rc == 2  # non-empty data dir without --force


def test_synth_force_regenerates_identically(pipeline_dir, tmp_path):
    out, cfg = pipeline_dir
    before = (out / "data" / "site1" / "arrays.npz").read_bytes()
    rc = main(
        [
            "synth-data",
            "--config",
            _write_cfg(tmp_path, tiny_config(out)),
            "--force",
        ]
    )
    assert rc == 0
    after = (out / "data" / "site1" / "arrays.npz").read_bytes()
    import numpy as np

    a = np.load(out / "data" / "site1" / "arrays.npz")
    assert a["images"].shape[0] == 8


def _write_cfg(tmp_path, raw) -> str:
    path = Path(tmp_path) / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_malformed_config_key_nonzero_exit_names_key(tmp_path, capsys):
    path = _write_cfg(tmp_path, {"floww": {"epochs": 1}})
    rc = main(["train-flow", "--config", path])
    assert rc == 2
    err = capsys.readouterr().err
    assert "floww" in err


def test_missing_upstream_artifact_exit_code(tmp_path):
    raw = tiny_config(tmp_path / "fresh")
    path = _write_cfg(tmp_path, raw)
    rc = main(["train-flow", "--config", path])  # no data yet
    assert rc == 3


def test_missing_adapted_checkpoint_named(tmp_path, capsys):
    raw = tiny_config(tmp_path / "r2")
    cfg = config_from_dict(raw)
    cmd_synth_data(cfg)
    rc = main(["adapt", "--config", _write_cfg(tmp_path, raw)])
    assert rc == 3
    assert "flow_final.pt" in capsys.readouterr().err


def test_no_stage_mutates_upstream_artifacts(pipeline_dir):
    out, cfg = pipeline_dir
    flow_bytes = (out / "flow" / "flow_final.pt").read_bytes()
    seg_bytes = (out / "segmenter" / "segmenter.pt").read_bytes()
    assert cmd_adapt(cfg) == 0
    assert cmd_evaluate(cfg) == 0
    assert (out / "flow" / "flow_final.pt").read_bytes() == flow_bytes
    assert (out / "segmenter" / "segmenter.pt").read_bytes() == seg_bytes


def test_stage_order_independence(tmp_path):
    # flow-then-harmonizer vs harmonizer-then-flow: identical artifacts
    raw_a = tiny_config(tmp_path / "order_a")
    raw_b = tiny_config(tmp_path / "order_b")
    cfg_a = config_from_dict(raw_a)
    cfg_b = config_from_dict(raw_b)
    cmd_synth_data(cfg_a)
    cmd_synth_data(cfg_b)
    cmd_train_flow(cfg_a)
    cmd_train_harmonizer(cfg_a)
    cmd_train_harmonizer(cfg_b)
    cmd_train_flow(cfg_b)
    fa, _ = load_flow_checkpoint(tmp_path / "order_a" / "flow" / "flow_final.pt")
    fb, _ = load_flow_checkpoint(tmp_path / "order_b" / "flow" / "flow_final.pt")
    assert state_dict_checksum(fa) == state_dict_checksum(fb)
    ha = load_harmonizer_checkpoint(tmp_path / "order_a" / "harmonizer" / "harmonizer_init.pt")
    hb = load_harmonizer_checkpoint(tmp_path / "order_b" / "harmonizer" / "harmonizer_init.pt")
    assert state_dict_checksum(ha) == state_dict_checksum(hb)


def test_cli_subprocess_smoke(tmp_path):
    raw = tiny_config(tmp_path / "subproc")
    cfg_path = _write_cfg(tmp_path, raw)
    proc = subprocess.run(
        [sys.executable, "-m", "flowharm.cli", "synth-data", "--config", cfg_path],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "wrote 2 sites" in proc.stdout


def test_flag_overrides_win_over_file(tmp_path):
    raw = tiny_config(tmp_path / "flagged")
    cfg_path = _write_cfg(tmp_path, raw)
    rc = main(["synth-data", "--config", cfg_path, "--out", str(tmp_path / "other"), "--seed", "11"])
    assert rc == 0
    used = yaml.safe_load((tmp_path / "other" / "config_used.yaml").read_text())
    assert used["seed"] == 11
    assert used["out_dir"] == str(tmp_path / "other")
