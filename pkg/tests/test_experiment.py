import json

import numpy as np
import pytest
import torch

from flowharm.checkpoint import state_dict_checksum
from flowharm.errors import ConfigError
from flowharm.experiment import ExperimentSetting, run_experiment
from flowharm.harmonizer import HarmonizerNet
from flowharm.metrics import per_image_scores
from flowharm.seeding import seeded_torch
from flowharm.segmentation import SegmentationNet, SegmenterTrainConfig, train_segmenter
from flowharm.synth import build_sites


@pytest.fixture(scope="module")
def world():
    sites = build_sites(seed=5, n_sites=3, n_images=10, height=32, width=32)
    datasets = {d.domain_id: d for d in sites}
    cfg = SegmenterTrainConfig(epochs=25, batch_size=4, decay_period=20, seed=1)
    segmenter, _ = train_segmenter(datasets["site1"], cfg)
    with seeded_torch(0):
        identity = HarmonizerNet(widths=(4, 6, 8))
    return datasets, segmenter, identity


def test_baseline_on_source_equals_direct_segmenter_score(world):
    datasets, segmenter, _ = world
    setting = ExperimentSetting("site1", ("site1",))
    report = run_experiment(setting, datasets, segmenter, methods=("baseline",))
    ds = datasets["site1"]
    images = ds.image_batch("test").to_continuous().data
    masks = ds.mask_batch("test")
    preds = segmenter.predict(images)
    direct = float(
        np.mean(
            [
                per_image_scores(preds[i].numpy(), masks[i].numpy(), 6)[0]
                for i in range(images.shape[0])
            ]
        )
    )
    assert report.scores[("baseline", "site1")].dsc_mean == pytest.approx(direct)


def test_identity_harmonizer_matches_baseline(world):
    datasets, segmenter, identity = world
    setting = ExperimentSetting("site1", ("site2",))
    report = run_experiment(
        setting, datasets, segmenter, methods=("baseline", "pretrained"), pretrained=identity
    )
    b = report.scores[("baseline", "site2")]
    p = report.scores[("pretrained", "site2")]
    assert b.dsc_mean == pytest.approx(p.dsc_mean)
    assert b.hd_mean == pytest.approx(p.hd_mean)


def test_segmenter_frozen_through_experiment(world):
    datasets, segmenter, identity = world
    before = state_dict_checksum(segmenter)
    setting = ExperimentSetting("site1", ("site2", "site3"))
    run_experiment(
        setting,
        datasets,
        segmenter,
        methods=("baseline", "pretrained"),
        pretrained=identity,
    )
    assert state_dict_checksum(segmenter) == before


def test_report_formats(world):
    datasets, segmenter, identity = world
    setting = ExperimentSetting("site1", ("site2",))
    report = run_experiment(
        setting, datasets, segmenter, methods=("baseline", "pretrained"), pretrained=identity
    )
    table = report.format_table()
    assert "DSC (%)" in table and "HD (px)" in table
    assert "baseline" in table and "site2" in table
    payload = json.loads(report.to_json())
    assert "baseline/site2" in payload["scores"]
    assert "averages" in payload
    avg_dsc, avg_hd = report.method_average("baseline")
    assert payload["averages"]["baseline"]["dsc"] == pytest.approx(avg_dsc)


def test_missing_artifacts_rejected(world):
    datasets, segmenter, identity = world
    setting = ExperimentSetting("site1", ("site2",))
    with pytest.raises(ConfigError, match="pretrained"):
        run_experiment(setting, datasets, segmenter, methods=("pretrained",))
    with pytest.raises(ConfigError, match="adapted"):
        run_experiment(setting, datasets, segmenter, methods=("adapted",))
    with pytest.raises(ConfigError, match="unknown method"):
        run_experiment(setting, datasets, segmenter, methods=("magic",))
    with pytest.raises(ConfigError, match="missing"):
        run_experiment(
            ExperimentSetting("site1", ("siteX",)), datasets, segmenter, methods=("baseline",)
        )
