"""Command-line harness.

Subcommands: ``synth``, ``prepare``, ``train``, ``eval``, ``cv``, ``baseline``.
Exit codes: 0 success, 2 usage or validation error, 1 runtime/numerical error.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .data import load_dataset, metrics, save_dataset, synth_generate
from .errors import ConfigError, DomainError, NumericalError
from .model import load_checkpoint


def _common(parser):
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--threads", type=int, help="concurrent folds (cv)")


def _inputs(parser):
    parser.add_argument("--dataset", type=Path)
    parser.add_argument("--cache", type=Path, help="directory written by 'prepare'")


def build_parser():
    parser = argparse.ArgumentParser(prog="tensorcspnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--trials", type=int, default=100, help="trials per class")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--fs", type=float, default=250.0)
    p.add_argument("--separation", type=float, default=3.0)

    p = sub.add_parser("prepare", help="build the SPD tensor cache")
    _common(p)
    p.add_argument("--dataset", type=Path)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    _common(p)
    _inputs(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    _inputs(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("cv", help="cross-validation or holdout run")
    _common(p)
    _inputs(p)

    p = sub.add_parser("baseline", help="MDM / TSM / CSP reference methods")
    _common(p)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--method", choices=["mdm", "tsm", "csp"])
    p.add_argument("--k", type=int, help="CSP filter pairs per band")
    return parser


def _config(args):
    overrides = {"seed": args.seed, "out": str(args.out) if args.out else None,
                 "threads": args.threads}
    for name in ("dataset", "cache"):
        val = getattr(args, name, None)
        overrides[name] = str(val) if val else None
    if args.command == "baseline":
        overrides["baseline.method"] = args.method
        overrides["baseline.k"] = args.k
    return pipeline.load_config(args.config, overrides)


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args, cfg):
    ds = synth_generate(args.classes, args.trials, args.channels, args.samples, args.fs,
                        cfg["seed"], args.separation)
    save_dataset(ds, cfg["out"])
    print(f"wrote {ds.meta.n_trials} trials to {cfg['out']}")


def cmd_prepare(args, cfg):
    if not cfg.get("dataset"):
        raise ConfigError("prepare needs --dataset (or 'dataset' in the config)", field="dataset")
    ds = load_dataset(cfg["dataset"])
    X = pipeline.prepare(ds, cfg)
    pipeline.write_cache(Path(cfg["out"]), X, ds, cfg)
    print(f"cache shape per trial {X.shape[1:]} -> {cfg['out']}")


def cmd_train(args, cfg):
    X, y, _, classes, prep, _ = pipeline.load_inputs(cfg)
    summary = pipeline.train_full(cfg, X, y, classes, prep, cfg["out"])
    _write_json(Path(cfg["out"]) / "metrics.json", summary)
    print(f"valid accuracy {summary['valid_accuracy']:.4f}")


def cmd_eval(args, cfg):
    X, y, _, classes, prep, _ = pipeline.load_inputs(cfg)
    model, manifest = load_checkpoint(args.checkpoint)
    pipeline.check_checkpoint(manifest, cfg, X, classes, prep)
    acc, conf = metrics(model.predict(X), y, classes)
    summary = {"schema_version": pipeline.METRICS_SCHEMA, "method": "tensor-cspnet",
               "mode": "eval", "n_test": int(len(y)), "accuracy": acc,
               "confusion": conf.tolist()}
    _write_json(Path(cfg["out"]) / "metrics.json", summary)
    print(f"accuracy {acc:.4f}")


def cmd_cv(args, cfg):
    X, y, sessions, classes, prep, _ = pipeline.load_inputs(cfg)
    summary = pipeline.run_cv(cfg, X, y, sessions, classes, cfg["out"], prep)
    pipeline.write_metrics(cfg["out"], summary)
    print(f"mean accuracy {summary['mean_accuracy']:.4f} +- {summary['std_accuracy']:.4f}")


def cmd_baseline(args, cfg):
    if not cfg.get("dataset"):
        raise ConfigError("baseline needs --dataset (or 'dataset' in the config)",
                          field="dataset")
    summary = pipeline.run_baseline(cfg, load_dataset(cfg["dataset"]))
    pipeline.write_metrics(cfg["out"], summary)
    print(f"{summary['method']} mean accuracy {summary['mean_accuracy']:.4f}")


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train,
            "eval": cmd_eval, "cv": cmd_cv, "baseline": cmd_baseline}


def _fail(cfg, exc, code):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    field = getattr(exc, "field", None)
    if field is not None:
        err["field"] = field
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    out = (cfg or {}).get("out")
    if out:
        try:
            _write_json(Path(out) / "error.json", err)
        except OSError:
            pass
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = None
    try:
        cfg = _config(args)
        if not cfg.get("out"):
            parser.error("--out is required (flag or 'out' in the config)")
        np.seterr(all="ignore")
        COMMANDS[args.command](args, cfg)
    except (NumericalError, DomainError, OSError) as exc:
        return _fail(cfg, exc, 1)
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        return _fail(cfg, exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
