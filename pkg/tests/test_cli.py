"""CLI contract: subcommands, exit codes, artifact plumbing, determinism."""

import json
from pathlib import Path

import pytest

from bendlens import pipeline
from bendlens.cli import main


def _mini_config(tmp_dir: Path) -> Path:
    doc = {
        "ensemble": {"M": 64, "side": 8, "configs": 3, "mode": "random",
                     "decorrelation_scale": 0.64, "seed": 1},
        "data": {"source": "shapes", "classes": 2,
                 "per_class_counts": {"train": 8, "test": 4},
                 "noise_std": 0.01, "s": 200,
                 "train_configs": ["C_2", "C_0"], "unseen_configs": ["C_1"],
                 "seed": 1},
        "gmvae": {"alpha": 1, "beta": 200, "omega": 50, "gamma": 50,
                  "tau": 0.5, "margin": 1.0, "d": 4, "epochs": 1,
                  "lr": 0.001, "batch": 8, "seed": 1},
        "ae": {"epochs": 1, "lr": 0.001, "batch": 8, "seed": 1},
        "eval": {"out_dir": str(tmp_dir / "out")},
    }
    path = tmp_dir / "mini.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One mini end-to-end run shared by the read-only CLI tests."""
    tmp_dir = tmp_path_factory.mktemp("cli")
    cfg = _mini_config(tmp_dir)
    out = tmp_dir / "out"
    for argv in (
        ["simulate", "--config", str(cfg), "--quiet"],
        ["synth-data", "--config", str(cfg), "--quiet"],
        ["train", "--model", "gmvae", "--config", str(cfg), "--quiet"],
        ["train", "--model", "ae", "--config", str(cfg), "--quiet"],
        ["train", "--model", "cae", "--config", str(cfg), "--quiet"],
        ["eval", "--config", str(cfg), "--quiet"],
    ):
        assert main(argv) == 0, argv
    return cfg, out


def test_pipeline_leaves_expected_artifacts(pipeline_dir):
    _, out = pipeline_dir
    for name in ("ensemble.spkl", "train.msdt", "test_seen.msdt",
                 "test_unseen.msdt", "gmvae.blns", "gmvae_log.csv", "ae.blns",
                 "cae.blns", "report.json", "psnr.csv", "manifest.json"):
        assert (out / name).exists(), name


def test_manifest_records_config_and_artifact_hashes(pipeline_dir):
    _, out = pipeline_dir
    manifest = json.loads((out / "manifest.json").read_text())
    assert "config_sha256" in manifest
    assert "report.json" in manifest["artifacts"]
    assert all(len(v) == 64 for v in manifest["artifacts"].values())


def test_eval_twice_is_byte_identical(pipeline_dir):
    cfg, out = pipeline_dir
    before = {p.name: p.read_bytes() for p in out.iterdir()
              if p.suffix in (".json", ".csv", ".svg")}
    assert main(["eval", "--config", str(cfg), "--quiet"]) == 0
    after = {p.name: p.read_bytes() for p in out.iterdir()
             if p.suffix in (".json", ".csv", ".svg")}
    assert before == after


def test_missing_prerequisite_exits_1_with_path(tmp_path, capsys):
    cfg = _mini_config(tmp_path)
    code = main(["synth-data", "--config", str(cfg), "--quiet"])
    assert code == 1
    err = capsys.readouterr().err
    assert "ensemble.spkl" in err


def test_train_before_synth_exits_1(tmp_path):
    cfg = _mini_config(tmp_path)
    assert main(["train", "--model", "gmvae", "--config", str(cfg),
                 "--quiet"]) == 1


def test_cae_requires_trained_ae(tmp_path, capsys):
    cfg = _mini_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--quiet"]) == 0
    assert main(["synth-data", "--config", str(cfg), "--quiet"]) == 0
    assert main(["train", "--model", "cae", "--config", str(cfg),
                 "--quiet"]) == 1


def test_schema_violation_exits_1_with_pointer(tmp_path, capsys):
    path = tmp_path / "bad.json"
    doc = json.loads(_mini_config(tmp_path).read_text())
    doc["gmvae"]["typo_rate"] = 1
    path.write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(path), "--quiet"]) == 1
    assert "/gmvae/typo_rate" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json"),
                 "--quiet"]) == 1


def test_unknown_flag_exits_1(capsys):
    assert main(["simulate", "--frobnicate"]) == 1


def test_unknown_subcommand_exits_1(capsys):
    assert main(["transmogrify"]) == 1


def test_unexpected_runtime_error_exits_2(tmp_path, monkeypatch, capsys):
    cfg = _mini_config(tmp_path)

    def boom(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "simulate", boom)
    assert main(["simulate", "--config", str(cfg), "--quiet"]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_divergence_exits_2(tmp_path, monkeypatch):
    from bendlens.nn import DivergenceError
    cfg = _mini_config(tmp_path)

    def diverge(*args, **kwargs):
        raise DivergenceError("divergence at epoch 0, step 0")

    monkeypatch.setattr(pipeline, "train_model", diverge)
    assert main(["train", "--model", "gmvae", "--config", str(cfg),
                 "--quiet"]) == 2


def test_experiment_flag_switches_mode(tmp_path):
    cfg = _mini_config(tmp_path)
    out = tmp_path / "exp2"
    assert main(["simulate", "--config", str(cfg), "--experiment", "2",
                 "--out", str(out), "--quiet"]) == 0
    from bendlens.fiber import load_ensemble
    assert load_ensemble(out / "ensemble.spkl").mode == "random"


def test_seed_override_changes_ensemble(tmp_path):
    cfg = _mini_config(tmp_path)
    out_a, out_b, out_c = (tmp_path / n for n in ("a", "b", "c"))
    for out, seed in ((out_a, "5"), (out_b, "5"), (out_c, "6")):
        assert main(["simulate", "--config", str(cfg), "--seed", seed,
                     "--out", str(out), "--quiet"]) == 0
    a = (out_a / "ensemble.spkl").read_bytes()
    assert a == (out_b / "ensemble.spkl").read_bytes()
    assert a != (out_c / "ensemble.spkl").read_bytes()


def test_gradcheck_single_seed_passes(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "pass" in out and "FAIL" not in out
