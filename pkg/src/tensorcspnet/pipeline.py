"""Experiment pipeline behind the command-line harness: run configuration,
the SPD tensor cache and the cross-validation / baseline runners.
"""
import copy
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines
from .data import Dataset, holdout_split, kfold_split, load_dataset, metrics, validation_split
from .errors import ConfigError
from .model import (CHECKPOINT_SCHEMA, Model, ModelConfig, TrainSpec, evaluate, read_tensors,
                    save_checkpoint, train, write_tensors)
from .signal import (BandSpec, SegSpec, apply_filterbank, center_scale, covariance,
                     design_filterbank, tensor_stack)

METRICS_SCHEMA = 1
CACHE_SCHEMA = 1

DEFAULT_CONFIG = {
    "dataset": None,
    "cache": None,
    "out": None,
    "seed": 0,
    "threads": 1,
    "bands": {
        "bands": [[f, f + 4] for f in range(4, 40, 4)],
        "order": 4,
        "stopband_atten_db": 30.0,
        "transition_hz": 2.0,
    },
    "segment": {"omega": None, "stride": None, "padding": 0},
    "ridge": 1e-4,
    "model": {
        "n": 1,
        "l": 1,
        "o": None,
        "conv": None,
        "use_rbn": True,
        "eps_reeig": 1e-4,
        "bias": False,
        "free_o": False,
    },
    "train": {
        "lr0": 0.01,
        "decay": 0.99,
        "epochs": 60,
        "patience": 15,
        "batch": 28,
        "valid_fraction": 0.1,
    },
    "split": {"kind": "kfold", "k": 10, "train_sessions": None, "test_sessions": None},
    "baseline": {"method": "mdm", "k": 3},
}


def merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}", field=key)
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = merge(cfg, user)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        section, _, sub = key.partition(".")
        if sub:
            cfg[section][sub] = val
        else:
            cfg[section] = val
    return cfg


def band_spec(cfg):
    b = cfg["bands"]
    return BandSpec(tuple(tuple(x) for x in b["bands"]), int(b["order"]),
                    float(b["stopband_atten_db"]), float(b["transition_hz"]))


def seg_spec(cfg, T):
    s = cfg["segment"]
    omega = T if s["omega"] is None else int(s["omega"])
    stride = omega if s["stride"] is None else int(s["stride"])
    return SegSpec(omega, stride, int(s["padding"]))


def prep_signature(cfg, fs, T):
    seg = seg_spec(cfg, T)
    return {"fs": fs, "bands": [list(b) for b in band_spec(cfg).bands],
            "order": cfg["bands"]["order"],
            "stopband_atten_db": cfg["bands"]["stopband_atten_db"],
            "transition_hz": cfg["bands"]["transition_hz"],
            "omega": seg.omega, "stride": seg.s, "padding": seg.p, "ridge": cfg["ridge"]}


# --------------------------------------------------------------------------
# SPD tensor cache


def prepare(ds: Dataset, cfg):
    """Stage-1 tensors ``(N, W, F, C, C)`` for every trial of ``ds``."""
    bands = band_spec(cfg)
    seg = seg_spec(cfg, ds.meta.T)
    return tensor_stack(ds.trials, ds.meta.fs, bands, seg, cfg["ridge"])


def write_cache(path, X, ds: Dataset, cfg):
    N, W, F, C, _ = X.shape
    meta = {"schema_version": CACHE_SCHEMA, "kind": "spd_cache",
            "shape": {"W": W, "F": F, "C": C}, "n_trials": N,
            "labels": [int(v) for v in ds.labels],
            "sessions": None if ds.sessions is None else [int(v) for v in ds.sessions],
            "class_names": list(ds.meta.class_names),
            "prep": prep_signature(cfg, ds.meta.fs, ds.meta.T)}
    write_tensors(path, meta, [("spd", X)])


def read_cache(path):
    manifest, tensors = read_tensors(path)
    if manifest.get("kind") != "spd_cache" or manifest.get("schema_version") != CACHE_SCHEMA:
        raise ConfigError(f"{path} is not a schema-{CACHE_SCHEMA} SPD cache", field="cache")
    sessions = manifest["sessions"]
    return (tensors["spd"], np.asarray(manifest["labels"], dtype=np.int64),
            None if sessions is None else np.asarray(sessions, dtype=np.int64), manifest)


def load_inputs(cfg):
    """Return ``(X, labels, sessions, classes, prep, dataset_or_None)``."""
    if cfg.get("cache"):
        X, y, sessions, manifest = read_cache(cfg["cache"])
        return X, y, sessions, len(manifest["class_names"]), manifest["prep"], None
    if not cfg.get("dataset"):
        raise ConfigError("either a dataset or a prepared cache is required", field="dataset")
    ds = load_dataset(cfg["dataset"])
    X = prepare(ds, cfg)
    return X, ds.labels, ds.sessions, ds.n_classes, prep_signature(cfg, ds.meta.fs, ds.meta.T), ds


# --------------------------------------------------------------------------
# runners


def model_config(cfg, X, classes):
    _, W, F, C, _ = X.shape
    m = dict(cfg["model"])
    if m["o"] is None:
        m["o"] = C
        m["free_o"] = m["free_o"] or C not in (4, 8, 12, 16, 20, 22, 24, 28, 32, 36)
    if W > 1 and m["conv"] is None:
        m["conv"] = [1, W, 10]
    return ModelConfig(w=W, m=F, classes=classes, channels=C, **m).validate()


def train_spec(cfg, seed):
    t = {k: v for k, v in cfg["train"].items() if k != "valid_fraction"}
    return TrainSpec(seed=seed, **t).validate()


def make_plan(cfg, y, sessions):
    sp = cfg["split"]
    if sp["kind"] == "kfold":
        return kfold_split(len(y), int(sp["k"]), cfg["seed"])
    if sp["kind"] == "holdout":
        if sessions is None:
            raise ConfigError("holdout split needs per-trial sessions", field="split")
        return holdout_split(sessions, sp["train_sessions"], sp["test_sessions"])
    raise ConfigError(f"unknown split kind {sp['kind']!r}", field="split")


def _summary(method, plan, folds, extra=None):
    accs = [f["accuracy"] for f in folds]
    out = {"schema_version": METRICS_SCHEMA, "method": method,
           "split": {"kind": plan.kind, "k": plan.k, **plan.info},
           "folds": folds,
           "mean_accuracy": float(np.mean(accs)),
           "std_accuracy": float(np.std(accs))}
    if extra:
        out.update(extra)
    return out


def _fit_fold(cfg, X, y, classes, tr, te, fold, out_dir=None, prep=None):
    trn, val = validation_split(tr, cfg["train"]["valid_fraction"], cfg["seed"] + fold)
    mcfg = model_config(cfg, X, classes)
    model = Model.build(mcfg, seed=cfg["seed"] + fold)
    hist = train(model, (X[trn], y[trn]), (X[val], y[val]), train_spec(cfg, cfg["seed"] + fold))
    pred = model.predict(X[te])
    acc, conf = metrics(pred, y[te], classes)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / f"fold_{fold:02d}" / "checkpoint",
                        extra={"prep": prep} if prep else None)
    return {"fold": fold, "n_train": int(trn.size), "n_valid": int(val.size),
            "n_test": int(te.size), "accuracy": acc, "confusion": conf.tolist(),
            "history": hist.to_dict()}


def run_cv(cfg, X, y, sessions, classes, out_dir=None, prep=None):
    plan = make_plan(cfg, y, sessions)
    jobs = list(enumerate(plan.folds()))

    def job(item):
        fold, (tr, te) = item
        return _fit_fold(cfg, X, y, classes, tr, te, fold, out_dir, prep)

    threads = max(1, int(cfg.get("threads") or 1))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            folds = list(pool.map(job, jobs))
    else:
        folds = [job(j) for j in jobs]
    mcfg = model_config(cfg, X, classes)
    return _summary("tensor-cspnet", plan, folds,
                    {"model": {"name": mcfg.name(), "config": mcfg.to_dict()}})


def broadband_covariances(ds: Dataset, ridge):
    x = np.stack([center_scale(t) for t in ds.trials.astype(np.float64)])
    return covariance(x, ridge)


def _baseline_factory(method, k):
    if method == "mdm":
        return baselines.MdmClassifier
    if method == "tsm":
        return baselines.TsmClassifier
    if method == "csp":
        return lambda: baselines.CspClassifier(k=k)
    raise ConfigError(f"unknown baseline method {method!r}", field="method")


def run_baseline(cfg, ds: Dataset):
    method = cfg["baseline"]["method"]
    k = int(cfg["baseline"]["k"])
    factory = _baseline_factory(method, k)
    if method == "csp":
        if not 1 <= k <= ds.n_channels // 2:
            raise ConfigError(f"csp k must lie in [1, {ds.n_channels // 2}], got {k}",
                              field="k")
        bank = design_filterbank(ds.meta.fs, band_spec(cfg))
        feats = apply_filterbank(
            np.stack([center_scale(t) for t in ds.trials.astype(np.float64)]), bank)
    else:
        feats = broadband_covariances(ds, cfg["ridge"])
    y = ds.labels
    classes = ds.n_classes
    plan = make_plan(cfg, y, ds.sessions)
    folds = []
    for fold, (tr, te) in enumerate(plan.folds()):
        if classes == 2:
            model = factory().fit(feats[tr], y[tr])
            pred = model.predict(feats[te])
        else:
            pred = baselines.ovr_wrap(factory, feats[tr], y[tr]).predict(feats[te])
        acc, conf = metrics(pred, y[te], classes)
        folds.append({"fold": fold, "n_train": int(tr.size), "n_test": int(te.size),
                      "accuracy": acc, "confusion": conf.tolist()})
    return _summary(method, plan, folds, {"k": k} if method == "csp" else None)


def write_metrics(out_dir, summary):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    lines = ["fold,n_test,accuracy"]
    lines += [f"{f['fold']},{f['n_test']},{f['accuracy']!r}" for f in summary["folds"]]
    lines.append(f"mean,,{summary['mean_accuracy']!r}")
    lines.append(f"std,,{summary['std_accuracy']!r}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def check_checkpoint(manifest, cfg, X, classes, prep):
    """Raise ConfigError naming the first field where a checkpoint disagrees with the run."""
    want = model_config(cfg, X, classes).to_dict()
    have = manifest["config"]
    for key in sorted(set(want) | set(have)):
        if want.get(key) != have.get(key):
            raise ConfigError(
                f"checkpoint was trained with model.{key}={have.get(key)!r}, "
                f"run config has {want.get(key)!r}", field=key)
    stored = (manifest.get("extra") or {}).get("prep")
    if stored is not None:
        for key in sorted(set(stored) | set(prep)):
            a, b = stored.get(key), prep.get(key)
            if isinstance(a, float) or isinstance(b, float):
                same = a is not None and b is not None and math.isclose(a, b)
            else:
                same = a == b
            if not same:
                raise ConfigError(f"checkpoint was prepared with {key}={a!r}, run uses {b!r}",
                                  field=key)


def train_full(cfg, X, y, classes, prep, out_dir):
    idx = np.arange(len(y))
    trn, val = validation_split(idx, cfg["train"]["valid_fraction"], cfg["seed"])
    model = Model.build(model_config(cfg, X, classes), seed=cfg["seed"])
    hist = train(model, (X[trn], y[trn]), (X[val], y[val]), train_spec(cfg, cfg["seed"]))
    save_checkpoint(model, Path(out_dir) / "checkpoint", extra={"prep": prep})
    v_loss, v_acc = evaluate(model, X[val], y[val])
    return {"schema_version": METRICS_SCHEMA, "method": "tensor-cspnet", "mode": "train",
            "model": {"name": model.cfg.name(), "config": model.cfg.to_dict()},
            "n_train": int(trn.size), "n_valid": int(val.size),
            "valid_loss": v_loss, "valid_accuracy": v_acc, "history": hist.to_dict(),
            "checkpoint_schema": CHECKPOINT_SCHEMA}
