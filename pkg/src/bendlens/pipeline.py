"""End-to-end experiment orchestration used by the CLI.

simulate -> synth-data -> train (gmvae / ae / cae) -> evaluate -> report.
Every stage is a pure function of (config, seeds), so repeated runs write
byte-identical artifacts and the manifest can assert reproducibility.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import data as datamod
from . import fiber
from .ae import Ae, Cae, train_ae, train_cae
from .config import ExperimentConfig
from .evaluation import (
    accuracy_stats,
    confusion_matrix,
    pca_project,
    psnr,
    silhouette,
)
from .gmvae import Gmvae, GmvaeHyper, train_gmvae
from .nn import load_checkpoint, save_checkpoint
from .report import EvalReport, PcaCloud, PsnrEntry, _dump_json, emit_report


class MissingArtifactError(FileNotFoundError):
    pass


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing prerequisite artifact: {path}")
    return path


def simulate(cfg: ExperimentConfig, out_path: Path) -> fiber.SpeckleEnsemble:
    configs = fiber.make_config_grid(cfg.n_configs)
    known = {c.id for c in configs}
    for cid in cfg.train_configs + cfg.unseen_configs:
        if cid not in known:
            raise fiber.FiberSimError(
                f"configuration '{cid}' is not on the {cfg.n_configs}-point grid")
    ensemble = fiber.gen_speckle_ensemble(
        cfg.M, cfg.n_pixels, configs, mode=cfg.mode,
        decorrelation_scale=cfg.decorrelation_scale, seed=cfg.ensemble_seed,
        speckle_memory=cfg.speckle_memory)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fiber.save_ensemble(out_path, ensemble)
    return ensemble


def _image_sets(cfg: ExperimentConfig):
    if cfg.source == "idx":
        full = datamod.read_idx(_require(Path(cfg.idx_images)),
                                _require(Path(cfg.idx_labels)),
                                target_side=cfg.side)
        keep = full.labels < cfg.classes
        images = full.images[keep]
        labels = full.labels[keep]
        rng = np.random.default_rng(cfg.data_seed)
        train_idx, test_idx = [], []
        for c in range(cfg.classes):
            pool = np.flatnonzero(labels == c)
            pool = rng.permutation(pool)
            train_idx += list(pool[: cfg.train_per_class])
            test_idx += list(pool[cfg.train_per_class : cfg.train_per_class + cfg.test_per_class])
        train = datamod.LabelledImageSet(images[train_idx], labels[train_idx],
                                         cfg.classes, "idx_file")
        test = datamod.LabelledImageSet(images[test_idx], labels[test_idx],
                                        cfg.classes, "idx_file")
        return train, test
    train = datamod.gen_shapes(cfg.train_per_class * cfg.classes, cfg.classes,
                               cfg.side, seed=cfg.data_seed)
    test = datamod.gen_shapes(cfg.test_per_class * cfg.classes, cfg.classes,
                              cfg.side, seed=cfg.data_seed + 1)
    return train, test


def synth_data(cfg: ExperimentConfig, ensemble: fiber.SpeckleEnsemble, out_dir: Path):
    """Build train / test_seen / test_unseen measurement datasets."""
    train_images, test_images = _image_sets(cfg)
    common = dict(noise_std=cfg.noise_std, s=cfg.s,
                  channels=cfg.normalization_channels, embed_images=True)
    train = datamod.synthesize_measurements(
        train_images, ensemble, cfg.train_configs,
        noise_seed=cfg.data_seed + 10, split="train", **common)
    test_seen = datamod.synthesize_measurements(
        test_images, ensemble, cfg.train_configs,
        noise_seed=cfg.data_seed + 11, split="test_seen", **common)
    test_unseen = datamod.synthesize_measurements(
        test_images, ensemble, cfg.unseen_configs,
        noise_seed=cfg.data_seed + 12, split="test_unseen", **common)
    out_dir.mkdir(parents=True, exist_ok=True)
    datamod.save_dataset(out_dir / "train.msdt", train)
    datamod.save_dataset(out_dir / "test_seen.msdt", test_seen)
    datamod.save_dataset(out_dir / "test_unseen.msdt", test_unseen)
    return train, test_seen, test_unseen


def _write_log_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(
            format(row[c], ".17g") if isinstance(row[c], float) else str(row[c])
            for c in cols))
    path.write_text("\n".join(lines) + "\n")


def _in_channels(cfg: ExperimentConfig) -> int:
    return 2 if cfg.normalization_channels == "both" else 1


def train_model(cfg: ExperimentConfig, which: str, out_dir: Path,
                train_set=None, quiet: bool = True):
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_set is None:
        train_set = datamod.load_dataset(_require(out_dir / "train.msdt"))
    hook = None if quiet else (lambda row: print(f"[{which}] {row}"))
    if which == "gmvae":
        hyper = GmvaeHyper(alpha=cfg.alpha, beta=cfg.beta, omega=cfg.omega,
                           gamma=cfg.gamma, tau=cfg.tau, margin=cfg.margin,
                           label_smooth=cfg.label_smooth, d=cfg.d)
        model, log = train_gmvae(train_set, cfg.side, hyper, cfg.gmvae_epochs,
                                 cfg.gmvae_lr, cfg.gmvae_batch, seed=cfg.gmvae_seed,
                                 in_channels=_in_channels(cfg), log_hook=hook)
        save_checkpoint(out_dir / "gmvae.blns", model.state_arrays())
        _write_log_csv(out_dir / "gmvae_log.csv", log)
        return model, log
    if which == "ae":
        model, log = train_ae(train_set, cfg.side, cfg.ae_epochs, cfg.ae_lr,
                              cfg.ae_batch, seed=cfg.ae_seed,
                              in_channels=_in_channels(cfg), log_hook=hook)
        save_checkpoint(out_dir / "ae.blns", model.state_arrays())
        _write_log_csv(out_dir / "ae_log.csv", log)
        return model, log
    if which == "cae":
        ae_model = load_ae(cfg, out_dir)
        model, log = train_cae(ae_model, train_set, cfg.side, cfg.ae_epochs,
                               cfg.ae_lr, cfg.ae_batch, seed=cfg.ae_seed + 1,
                               log_hook=hook)
        save_checkpoint(out_dir / "cae.blns", model.state_arrays())
        _write_log_csv(out_dir / "cae_log.csv", log)
        return model, log
    raise ValueError(f"unknown model '{which}'")


def load_gmvae(cfg: ExperimentConfig, out_dir: Path) -> Gmvae:
    hyper = GmvaeHyper(alpha=cfg.alpha, beta=cfg.beta, omega=cfg.omega,
                       gamma=cfg.gamma, tau=cfg.tau, margin=cfg.margin,
                       label_smooth=cfg.label_smooth, d=cfg.d)
    model = Gmvae(cfg.side, cfg.classes, hyper, in_channels=_in_channels(cfg))
    model.load_state_arrays(load_checkpoint(_require(out_dir / "gmvae.blns")))
    return model


def load_ae(cfg: ExperimentConfig, out_dir: Path) -> Ae:
    model = Ae(cfg.side, in_channels=_in_channels(cfg))
    model.load_state_arrays(load_checkpoint(_require(out_dir / "ae.blns")))
    return model


def load_cae(cfg: ExperimentConfig, out_dir: Path) -> Cae:
    model = Cae(cfg.side, cfg.classes)
    model.load_state_arrays(load_checkpoint(_require(out_dir / "cae.blns")))
    return model


def _per_config(dataset):
    groups: dict[str, list[int]] = {}
    for i, cid in enumerate(dataset.config_ids()):
        groups.setdefault(cid, []).append(i)
    return groups


def evaluate(cfg: ExperimentConfig, gmvae_model: Gmvae, ae_model: Ae, cae_model: Cae,
             test_seen, test_unseen) -> EvalReport:
    psnr_entries: list[PsnrEntry] = []
    gm_preds: dict[str, np.ndarray] = {}
    cae_preds: dict[str, np.ndarray] = {}
    for dataset, seen in ((test_seen, True), (test_unseen, False)):
        groups = _per_config(dataset)
        ys = dataset.stack_y()
        xs = dataset.stack_images()
        labels = dataset.labels()
        for cid, idx in groups.items():
            idx = np.array(idx)
            gm_rec = gmvae_model.reconstruct(ys[idx])
            ae_rec = ae_model.reconstruct(ys[idx])
            for method, rec in (("gmvae", gm_rec), ("ae", ae_rec)):
                vals = [psnr(x, r) for x, r in zip(xs[idx], rec)]
                psnr_entries.append(PsnrEntry(cid, method, float(np.mean(vals)),
                                              float(np.std(vals)), seen))
            if not seen:
                gm_preds[cid], _ = gmvae_model.classify(ys[idx])
                cae_preds[cid], _ = cae_model.classify(ae_rec)

    k = test_unseen.k
    confusion: dict[str, np.ndarray] = {}
    accuracy: dict[str, tuple[float, float]] = {}
    unseen_groups = _per_config(test_unseen)
    unseen_labels = test_unseen.labels()
    for method, preds in (("gmvae", gm_preds), ("cae", cae_preds)):
        mats = []
        accs = []
        for cid, idx in unseen_groups.items():
            idx = np.array(idx)
            _, norm = confusion_matrix(preds[cid], unseen_labels[idx], k)
            mats.append(norm)
            accs.append(float((preds[cid] == unseen_labels[idx]).mean()))
        confusion[method] = np.mean(mats, axis=0)
        accuracy[method] = accuracy_stats(accs)

    # PCA + silhouette: one seen and one unseen configuration pooled
    seen_cid = cfg.train_configs[0]
    unseen_cid = cfg.unseen_configs[0]
    seen_groups = _per_config(test_seen)
    idx_seen = np.array(seen_groups[seen_cid])
    idx_unseen = np.array(unseen_groups[unseen_cid])
    raw = np.concatenate([test_seen.stack_y()[idx_seen],
                          test_unseen.stack_y()[idx_unseen]])
    latent = np.concatenate([gmvae_model.latent_means(test_seen.stack_y()[idx_seen]),
                             gmvae_model.latent_means(test_unseen.stack_y()[idx_unseen])])
    labels = np.concatenate([test_seen.labels()[idx_seen],
                             unseen_labels[idx_unseen]])
    config_ids = [seen_cid] * len(idx_seen) + [unseen_cid] * len(idx_unseen)
    pca: dict[str, PcaCloud] = {}
    sil: dict[str, float] = {}
    for which, vectors in (("raw", raw), ("latent", latent)):
        points, explained = pca_project(vectors, components=3)
        pca[which] = PcaCloud(points=points, labels=labels, config_ids=config_ids,
                              explained=explained)
        sil[which] = silhouette(vectors, labels)

    metadata = {
        "train_configs": cfg.train_configs,
        "unseen_configs": cfg.unseen_configs,
        "pca_configs": [seen_cid, unseen_cid],
        "seeds": {"ensemble": cfg.ensemble_seed, "data": cfg.data_seed,
                  "gmvae": cfg.gmvae_seed, "ae": cfg.ae_seed},
        "mode": cfg.mode,
        "s": cfg.s,
    }
    return EvalReport(psnr=psnr_entries, confusion=confusion, accuracy=accuracy,
                      pca=pca, silhouette=sil, metadata=metadata)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, artifacts: list[Path]) -> Path:
    config_hash = hashlib.sha256(
        json.dumps(cfg.doc, sort_keys=True).encode()).hexdigest()
    entries = {
        str(p.relative_to(out_dir)): _sha256(p)
        for p in sorted(artifacts)
        if p.suffix != ".png"  # rendered figures are not reproducibility-bearing
    }
    manifest = {"config_sha256": config_hash, "artifacts": entries}
    path = out_dir / "manifest.json"
    path.write_text(_dump_json(manifest) + "\n")
    return path


def demo(cfg: ExperimentConfig, out_dir: Path, quiet: bool = True) -> Path:
    """Full pipeline: ensemble, datasets, all three models, evaluation, manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ensemble = simulate(cfg, out_dir / "ensemble.spkl")
    train, test_seen, test_unseen = synth_data(cfg, ensemble, out_dir)
    gm, _ = train_model(cfg, "gmvae", out_dir, train_set=train, quiet=quiet)
    ae_model, _ = train_model(cfg, "ae", out_dir, train_set=train, quiet=quiet)
    cae_model, _ = train_model(cfg, "cae", out_dir, train_set=train, quiet=quiet)
    rep = evaluate(cfg, gm, ae_model, cae_model, test_seen, test_unseen)
    written = emit_report(rep, out_dir)
    artifacts = [out_dir / "ensemble.spkl", out_dir / "train.msdt",
                 out_dir / "test_seen.msdt", out_dir / "test_unseen.msdt",
                 out_dir / "gmvae.blns", out_dir / "ae.blns", out_dir / "cae.blns",
                 out_dir / "gmvae_log.csv", out_dir / "ae_log.csv",
                 out_dir / "cae_log.csv"] + list(written)
    return write_manifest(out_dir, cfg, artifacts)
