import pytest
import yaml

from flowharm.config import RunConfig, config_from_dict, load_config, save_config
from flowharm.errors import ConfigError


def test_defaults_match_published_training_settings():
    cfg = RunConfig()
    assert cfg.flow.epochs == 1600
    assert cfg.flow.lr == 1e-3
    assert cfg.flow.decay_period == 200
    assert cfg.flow.margin_c == 1.2
    assert cfg.harmonizer.epochs == 200
    assert cfg.harmonizer.decay_period == 30
    assert cfg.segmenter.lr == 4e-3
    assert cfg.data.n_images == 20
    assert cfg.flow.arch.couplings_per_block == (4, 4, 4)


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError, match="typo_key"):
        config_from_dict({"typo_key": 1})
    with pytest.raises(ConfigError, match="flow.bogus"):
        config_from_dict({"flow": {"bogus": 2}})
    with pytest.raises(ConfigError, match="flow.arch.nope"):
        config_from_dict({"flow": {"arch": {"nope": 3}}})


def test_partial_override_keeps_other_defaults():
    cfg = config_from_dict({"seed": 42, "flow": {"epochs": 5}})
    assert cfg.seed == 42
    assert cfg.flow.epochs == 5
    assert cfg.flow.lr == 1e-3


def test_yaml_roundtrip(tmp_path):
    cfg = config_from_dict({"seed": 9, "out_dir": str(tmp_path / "run")})
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded == cfg


def test_missing_config_file_raises(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_malformed_yaml_raises(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("flow: [unclosed")
    with pytest.raises(ConfigError):
        load_config(path)


def test_data_dir_defaults_under_out_dir():
    cfg = config_from_dict({"out_dir": "/tmp/x"})
    assert str(cfg.data_dir()) == "/tmp/x/data"
    cfg2 = config_from_dict({"out_dir": "/tmp/x", "data": {"dir": "/elsewhere"}})
    assert str(cfg2.data_dir()) == "/elsewhere"


def test_methods_tuple_conversion():
    cfg = config_from_dict({"evaluation": {"methods": ["baseline"]}})
    assert cfg.evaluation.methods == ("baseline",)
