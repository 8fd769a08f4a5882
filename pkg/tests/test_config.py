"""Config validation: strict schema, JSON-pointer diagnostics, overrides."""

import json
from pathlib import Path

import pytest

from bendlens.config import ConfigError, ExperimentConfig, load_config

REPO = Path(__file__).resolve().parent.parent


def _doc():
    return json.loads((REPO / "configs" / "desk.json").read_text())


def test_shipped_configs_load():
    desk = load_config(REPO / "configs" / "desk.json")
    paper = load_config(REPO / "configs" / "paper.json")
    assert desk.M == desk.side ** 2 == 256
    assert paper.M == paper.side ** 2 == 4096
    assert not set(desk.train_configs) & set(desk.unseen_configs)


def test_unknown_key_reports_pointer():
    doc = _doc()
    doc["gmvae"]["learning_rate"] = 0.1
    with pytest.raises(ConfigError, match="/gmvae/learning_rate"):
        ExperimentConfig(doc)


def test_missing_key_reports_pointer():
    doc = _doc()
    del doc["data"]["noise_std"]
    with pytest.raises(ConfigError, match="/data/noise_std"):
        ExperimentConfig(doc)


def test_wrong_type_reports_pointer():
    doc = _doc()
    doc["ensemble"]["M"] = "lots"
    with pytest.raises(ConfigError, match="/ensemble/M"):
        ExperimentConfig(doc)


def test_side_must_be_power_of_two():
    doc = _doc()
    doc["ensemble"]["side"] = 24
    with pytest.raises(ConfigError, match="/ensemble/side"):
        ExperimentConfig(doc)


def test_overlapping_config_splits_rejected():
    doc = _doc()
    doc["data"]["unseen_configs"] = list(doc["data"]["train_configs"][:1])
    with pytest.raises(ConfigError, match="disjoint"):
        ExperimentConfig(doc)


def test_idx_source_requires_paths():
    doc = _doc()
    doc["data"]["source"] = "idx"
    with pytest.raises(ConfigError, match="/data/idx_images"):
        ExperimentConfig(doc)


def test_seed_override_hits_every_section():
    cfg = ExperimentConfig(_doc())
    cfg.override_seed(123)
    assert (cfg.ensemble_seed, cfg.data_seed, cfg.gmvae_seed, cfg.ae_seed) == (123,) * 4
    assert cfg.doc["ensemble"]["seed"] == 123
    assert cfg.doc["gmvae"]["seed"] == 123


def test_apply_experiment_switches_mode_and_scale():
    cfg = ExperimentConfig(_doc())
    cfg.apply_experiment(1)
    assert (cfg.mode, cfg.s) == ("wavefront_shaped", 10.0)
    cfg.apply_experiment(2)
    assert (cfg.mode, cfg.s) == ("random", 200.0)
    assert cfg.doc["ensemble"]["mode"] == "random"
    with pytest.raises(ConfigError, match="experiment"):
        cfg.apply_experiment(3)


def test_label_smooth_optional_with_default():
    doc = _doc()
    doc["gmvae"].pop("label_smooth", None)
    cfg = ExperimentConfig(doc)
    assert cfg.label_smooth == 0.001


def test_load_config_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)
