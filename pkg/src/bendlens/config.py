"""Strict experiment configuration.

The JSON document is validated against a closed schema: unknown keys and
wrong types are rejected with a JSON-pointer diagnostic so hyperparameter
typos never pass silently.
"""

from __future__ import annotations

import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def _expect(cond: bool, pointer: str, message: str):
    if not cond:
        raise ConfigError(f"{pointer}: {message}")


def _check_int(value, pointer, lo=None, hi=None):
    _expect(isinstance(value, int) and not isinstance(value, bool), pointer, "expected an integer")
    if lo is not None:
        _expect(value >= lo, pointer, f"must be >= {lo}")
    if hi is not None:
        _expect(value <= hi, pointer, f"must be <= {hi}")
    return value


def _check_number(value, pointer, lo=None, strict_lo=None):
    _expect(isinstance(value, (int, float)) and not isinstance(value, bool),
            pointer, "expected a number")
    value = float(value)
    if lo is not None:
        _expect(value >= lo, pointer, f"must be >= {lo}")
    if strict_lo is not None:
        _expect(value > strict_lo, pointer, f"must be > {strict_lo}")
    return value


def _check_str(value, pointer, choices=None):
    _expect(isinstance(value, str), pointer, "expected a string")
    if choices is not None:
        _expect(value in choices, pointer, f"must be one of {sorted(choices)}")
    return value


def _check_str_list(value, pointer):
    _expect(isinstance(value, list) and all(isinstance(v, str) for v in value),
            pointer, "expected a list of strings")
    return list(value)


def _check_keys(doc, pointer, required: set[str], optional: set[str] = frozenset()):
    _expect(isinstance(doc, dict), pointer, "expected an object")
    unknown = set(doc) - required - optional
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{pointer}/{key}: unknown key")
    missing = required - set(doc)
    if missing:
        key = sorted(missing)[0]
        raise ConfigError(f"{pointer}/{key}: missing required key")


class ExperimentConfig:
    def __init__(self, doc: dict):
        _check_keys(doc, "", {"ensemble", "data", "gmvae", "ae", "eval"})

        ens = doc["ensemble"]
        _check_keys(ens, "/ensemble",
                    {"M", "side", "configs", "mode", "decorrelation_scale", "seed"},
                    {"speckle_memory"})
        self.M = _check_int(ens["M"], "/ensemble/M", lo=1)
        self.side = _check_int(ens["side"], "/ensemble/side", lo=8)
        _expect(self.side & (self.side - 1) == 0, "/ensemble/side", "must be a power of two")
        self.n_configs = _check_int(ens["configs"], "/ensemble/configs", lo=2)
        self.mode = _check_str(ens["mode"], "/ensemble/mode", {"wavefront_shaped", "random"})
        self.decorrelation_scale = _check_number(
            ens["decorrelation_scale"], "/ensemble/decorrelation_scale", strict_lo=0.0)
        self.speckle_memory = _check_number(
            ens.get("speckle_memory", 0.75), "/ensemble/speckle_memory", strict_lo=0.0)
        self.ensemble_seed = _check_int(ens["seed"], "/ensemble/seed", lo=0)

        dat = doc["data"]
        _check_keys(dat, "/data",
                    {"source", "classes", "per_class_counts", "noise_std", "s",
                     "train_configs", "unseen_configs", "seed"},
                    {"idx_images", "idx_labels", "normalization_channels"})
        self.source = _check_str(dat["source"], "/data/source", {"shapes", "idx"})
        self.classes = _check_int(dat["classes"], "/data/classes", lo=2, hi=8)
        counts = dat["per_class_counts"]
        _check_keys(counts, "/data/per_class_counts", {"train", "test"})
        self.train_per_class = _check_int(counts["train"], "/data/per_class_counts/train", lo=1)
        self.test_per_class = _check_int(counts["test"], "/data/per_class_counts/test", lo=1)
        self.noise_std = _check_number(dat["noise_std"], "/data/noise_std", lo=0.0)
        self.s = _check_number(dat["s"], "/data/s", strict_lo=0.0)
        self.train_configs = _check_str_list(dat["train_configs"], "/data/train_configs")
        self.unseen_configs = _check_str_list(dat["unseen_configs"], "/data/unseen_configs")
        _expect(not set(self.train_configs) & set(self.unseen_configs),
                "/data/unseen_configs", "must be disjoint from train_configs")
        self.data_seed = _check_int(dat["seed"], "/data/seed", lo=0)
        self.idx_images = dat.get("idx_images")
        self.idx_labels = dat.get("idx_labels")
        if self.source == "idx":
            _expect(isinstance(self.idx_images, str), "/data/idx_images",
                    "required when source is 'idx'")
            _expect(isinstance(self.idx_labels, str), "/data/idx_labels",
                    "required when source is 'idx'")
        self.normalization_channels = _check_str(
            dat.get("normalization_channels", "both"), "/data/normalization_channels",
            {"both", "first", "second"})

        gm = doc["gmvae"]
        _check_keys(gm, "/gmvae",
                    {"alpha", "beta", "omega", "gamma", "tau", "margin", "d",
                     "epochs", "lr", "batch", "seed"}, {"label_smooth"})
        self.alpha = _check_number(gm["alpha"], "/gmvae/alpha", lo=0.0)
        self.beta = _check_number(gm["beta"], "/gmvae/beta", lo=0.0)
        self.omega = _check_number(gm["omega"], "/gmvae/omega", lo=0.0)
        self.gamma = _check_number(gm["gamma"], "/gmvae/gamma", lo=0.0)
        self.tau = _check_number(gm["tau"], "/gmvae/tau", strict_lo=0.0)
        self.margin = _check_number(gm["margin"], "/gmvae/margin", lo=0.0)
        self.label_smooth = _check_number(
            gm.get("label_smooth", 0.001), "/gmvae/label_smooth", strict_lo=0.0)
        self.d = _check_int(gm["d"], "/gmvae/d", lo=1)
        self.gmvae_epochs = _check_int(gm["epochs"], "/gmvae/epochs", lo=1)
        self.gmvae_lr = _check_number(gm["lr"], "/gmvae/lr", strict_lo=0.0)
        self.gmvae_batch = _check_int(gm["batch"], "/gmvae/batch", lo=2)
        self.gmvae_seed = _check_int(gm["seed"], "/gmvae/seed", lo=0)

        ae = doc["ae"]
        _check_keys(ae, "/ae", {"epochs", "lr", "batch", "seed"})
        self.ae_epochs = _check_int(ae["epochs"], "/ae/epochs", lo=1)
        self.ae_lr = _check_number(ae["lr"], "/ae/lr", strict_lo=0.0)
        self.ae_batch = _check_int(ae["batch"], "/ae/batch", lo=1)
        self.ae_seed = _check_int(ae["seed"], "/ae/seed", lo=0)

        ev = doc["eval"]
        _check_keys(ev, "/eval", {"out_dir"})
        self.out_dir = _check_str(ev["out_dir"], "/eval/out_dir")

        self.doc = doc

    @property
    def n_pixels(self) -> int:
        return self.side * self.side

    def override_seed(self, seed: int) -> None:
        """--seed flag: force every section seed."""
        self.ensemble_seed = seed
        self.data_seed = seed
        self.gmvae_seed = seed
        self.ae_seed = seed
        doc = self.doc
        doc["ensemble"]["seed"] = seed
        doc["data"]["seed"] = seed
        doc["gmvae"]["seed"] = seed
        doc["ae"]["seed"] = seed

    def apply_experiment(self, experiment: int) -> None:
        """Experiment 1: wavefront-shaped ensemble, s=10; experiment 2: random, s=200."""
        if experiment == 1:
            self.mode = "wavefront_shaped"
            self.s = 10.0
        elif experiment == 2:
            self.mode = "random"
            self.s = 200.0
        else:
            raise ConfigError(f"/experiment: must be 1 or 2, got {experiment}")
        self.doc["ensemble"]["mode"] = self.mode
        self.doc["data"]["s"] = self.s


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig(doc)
