"""Command-line front end: simulate / synth-data / train / eval / gradcheck / demo.

Exit codes: 0 success, 1 validation error (bad config, bad arguments,
missing prerequisite artifact, malformed input file), 2 runtime error
(training divergence, unexpected failure).
"""

from __future__ import annotations

import os

# BENDLENS_THREADS caps the BLAS thread pools; must happen before numpy loads.
_threads = os.environ.get("BENDLENS_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
from pathlib import Path

from . import data as datamod
from . import fiber, pipeline
from .config import ConfigError, load_config
from .gmvae import ModelError
from .gradsuite import run_gradient_suite
from .nn import CheckpointError, DivergenceError
from .report import ReportError, emit_report

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    ConfigError,
    pipeline.MissingArtifactError,
    fiber.FiberSimError,
    fiber.SpeckleFileError,
    datamod.DataError,
    CheckpointError,
    ModelError,
    ReportError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract says 1 for validation."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bendlens",
                     description="Simulated bend-resistant fiber imaging pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="configs/desk.json",
                        help="experiment config JSON (default configs/desk.json)")
    common.add_argument("--out", default=None,
                        help="output directory (default: eval.out_dir from the config)")
    common.add_argument("--seed", type=int, default=None,
                        help="override every section seed")
    common.add_argument("--quiet", action="store_true",
                        help="suppress progress output")
    common.add_argument("--experiment", type=int, choices=(1, 2), default=None,
                        help="1: wavefront-shaped ensemble, s=10; 2: random, s=200")

    p = sub.add_parser("simulate", parents=[common],
                       help="generate the speckle-matrix ensemble")
    p.add_argument("--ensemble-out", default=None,
                   help="ensemble file (default <out>/ensemble.spkl)")

    p = sub.add_parser("synth-data", parents=[common],
                       help="synthesize measurement datasets from the ensemble")
    p.add_argument("--ensemble-in", default=None,
                   help="ensemble file (default <out>/ensemble.spkl)")
    p.add_argument("--images", choices=("idx", "shapes"), default=None,
                   help="override the image source")
    p.add_argument("--train-configs", nargs="+", default=None,
                   help="override the seen configuration ids")
    p.add_argument("--unseen-configs", nargs="+", default=None,
                   help="override the unseen configuration ids")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", choices=("gmvae", "ae", "cae"), required=True)

    sub.add_parser("eval", parents=[common],
                   help="evaluate trained models and emit the report")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--quiet", action="store_true")

    sub.add_parser("demo", parents=[common],
                   help="full pipeline: simulate, synth-data, train all, eval")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.experiment is not None:
        cfg.apply_experiment(args.experiment)
    if args.seed is not None:
        cfg.override_seed(args.seed)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    return cfg, out


def _say(args, message):
    if not args.quiet:
        print(message)


def _cmd_simulate(args) -> int:
    cfg, out = _load(args)
    target = Path(args.ensemble_out) if args.ensemble_out else out / "ensemble.spkl"
    pipeline.simulate(cfg, target)
    _say(args, f"wrote {target} ({cfg.M}x{cfg.n_pixels}, {cfg.n_configs} configurations)")
    return EXIT_OK


def _cmd_synth_data(args) -> int:
    cfg, out = _load(args)
    if args.images is not None:
        cfg.source = args.images
        cfg.doc["data"]["source"] = args.images
        if args.images == "idx" and not (cfg.idx_images and cfg.idx_labels):
            raise ConfigError("/data/idx_images: required when source is 'idx'")
    if args.train_configs is not None:
        cfg.train_configs = list(args.train_configs)
        cfg.doc["data"]["train_configs"] = cfg.train_configs
    if args.unseen_configs is not None:
        cfg.unseen_configs = list(args.unseen_configs)
        cfg.doc["data"]["unseen_configs"] = cfg.unseen_configs
    if set(cfg.train_configs) & set(cfg.unseen_configs):
        raise ConfigError("/data/unseen_configs: must be disjoint from train_configs")
    source = Path(args.ensemble_in) if args.ensemble_in else out / "ensemble.spkl"
    if not source.exists():
        raise pipeline.MissingArtifactError(f"missing prerequisite artifact: {source}")
    ensemble = fiber.load_ensemble(source)
    train, seen, unseen = pipeline.synth_data(cfg, ensemble, out)
    _say(args, f"wrote {out}/train.msdt ({len(train)} records), "
               f"test_seen.msdt ({len(seen)}), test_unseen.msdt ({len(unseen)})")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg, out = _load(args)
    pipeline.train_model(cfg, args.model, out, quiet=args.quiet)
    _say(args, f"wrote {out}/{args.model}.blns and {out}/{args.model}_log.csv")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg, out = _load(args)
    gm = pipeline.load_gmvae(cfg, out)
    ae_model = pipeline.load_ae(cfg, out)
    cae_model = pipeline.load_cae(cfg, out)
    test_seen = datamod.load_dataset(pipeline._require(out / "test_seen.msdt"))
    test_unseen = datamod.load_dataset(pipeline._require(out / "test_unseen.msdt"))
    report = pipeline.evaluate(cfg, gm, ae_model, cae_model, test_seen, test_unseen)
    written = emit_report(report, out)
    pipeline.write_manifest(out, cfg, list(written))
    _say(args, f"wrote {out}/report.json and {len(written)} report artifacts")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rows = run_gradient_suite(seeds=args.seeds)
    width = max(len(name) for name, _, _ in rows)
    failed = False
    for name, err, ok in rows:
        failed = failed or not ok
        if not args.quiet or not ok:
            print(f"{name:{width}s}  {err:.3e}  {'pass' if ok else 'FAIL'}")
    if failed:
        print("gradient suite FAILED", file=sys.stderr)
        return EXIT_VALIDATION
    if not args.quiet:
        print(f"all {len(rows)} checks passed over {args.seeds} seeds")
    return EXIT_OK


def _cmd_demo(args) -> int:
    cfg, out = _load(args)
    manifest = pipeline.demo(cfg, out, quiet=args.quiet)
    _say(args, f"wrote {manifest}")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "demo": _cmd_demo,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - contract maps the rest to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
