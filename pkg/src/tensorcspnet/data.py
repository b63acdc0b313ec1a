"""Dataset storage, synthetic generation, splitting and metrics.

On-disk layout of a dataset directory::

    meta.json      {"schema_version", "fs", "channel_names", "class_names",
                    "n_trials", "T"}
    trials.bin     float32 little-endian, row-major [trial][channel][sample]
    labels.json    [int, ...]  one class index per trial
    sessions.json  [int, ...]  optional recording-session id per trial
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DATASET_SCHEMA = 1


@dataclass
class DatasetMeta:
    fs: float
    channel_names: list
    class_names: list
    n_trials: int
    T: int
    schema_version: int = DATASET_SCHEMA


@dataclass
class Dataset:
    trials: np.ndarray  # (n_trials, C, T) float32
    labels: np.ndarray  # (n_trials,) int64
    meta: DatasetMeta
    sessions: np.ndarray | None = None

    @property
    def n_channels(self):
        return self.trials.shape[1]

    @property
    def n_classes(self):
        return len(self.meta.class_names)

    def validate(self):
        m = self.meta
        if m.schema_version != DATASET_SCHEMA:
            raise ValueError(f"unsupported dataset schema_version {m.schema_version}")
        expected = (m.n_trials, len(m.channel_names), m.T)
        if self.trials.shape != expected:
            raise ValueError(f"trial payload has shape {self.trials.shape}, meta says {expected}")
        if not np.all(np.isfinite(self.trials)):
            raise ValueError("trial payload contains non-finite values")
        if self.labels.shape != (m.n_trials,):
            raise ValueError(f"expected {m.n_trials} labels, got {self.labels.shape[0]}")
        k = len(m.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= k)][0])
            raise ValueError(f"label {bad} does not index one of the {k} classes")
        if self.sessions is not None and self.sessions.shape != (m.n_trials,):
            raise ValueError("sessions must hold one entry per trial")
        return self


def save_dataset(ds: Dataset, path):
    ds.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(asdict(ds.meta), indent=2) + "\n")
    (path / "trials.bin").write_bytes(np.ascontiguousarray(ds.trials, dtype="<f4").tobytes())
    (path / "labels.json").write_text(json.dumps([int(v) for v in ds.labels]) + "\n")
    if ds.sessions is not None:
        (path / "sessions.json").write_text(json.dumps([int(v) for v in ds.sessions]) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    fields = set(DatasetMeta.__dataclass_fields__)
    if set(raw) != fields:
        raise ValueError(f"meta.json must have exactly the fields {sorted(fields)}")
    meta = DatasetMeta(**raw)
    if meta.schema_version != DATASET_SCHEMA:
        raise ValueError(f"unsupported dataset schema_version {meta.schema_version}")
    C = len(meta.channel_names)
    blob = (path / "trials.bin").read_bytes()
    want = meta.n_trials * C * meta.T * 4
    if len(blob) != want:
        raise ValueError(f"trials.bin holds {len(blob)} bytes, meta implies {want}")
    trials = np.frombuffer(blob, dtype="<f4").reshape(meta.n_trials, C, meta.T).astype(np.float32)
    labels = np.asarray(json.loads((path / "labels.json").read_text()), dtype=np.int64)
    sessions = None
    if (path / "sessions.json").exists():
        sessions = np.asarray(json.loads((path / "sessions.json").read_text()), dtype=np.int64)
    return Dataset(trials, labels, meta, sessions).validate()


# --------------------------------------------------------------------------
# synthetic data

SOURCE_BANDS = ((8, 12), (20, 24), (12, 16), (16, 20), (24, 28), (4, 8), (28, 32), (32, 36))


def _band_noise(rng, n, T, fs, band):
    spec = np.fft.rfft(rng.standard_normal((n, T)), axis=-1)
    freqs = np.fft.rfftfreq(T, 1.0 / fs)
    mask = (freqs >= band[0]) & (freqs < band[1])
    # white noise keeps variance 1 only on the retained fraction of the spectrum
    frac = max(mask.sum(), 1) / (T / 2.0)
    return np.fft.irfft(spec * mask, n=T, axis=-1) / np.sqrt(frac)


def synth_generate(classes, trials_per_class, C, T, fs, seed, separation=3.0,
                   jitter=0.25, background=0.5):
    """Two-or-more-class band-limited mixture data with known structure.

    Every trial mixes ``C`` band-limited sources through a shared mixing
    matrix. Class ``c`` raises the variance of source ``c mod C`` from 1 to
    ``1 + separation``; per-trial log-normal source jitter and shared
    broadband background noise make the problem non-trivial.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    if classes < 2 or trials_per_class < 1 or C < 1 or T < 2:
        raise ValueError("need >= 2 classes, >= 1 trial per class, C >= 1 and T >= 2")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((C, C)))
    mixing = q * rng.uniform(0.7, 1.3, size=C)
    bg_mixing = rng.standard_normal((C, C)) / np.sqrt(C)
    bands = [SOURCE_BANDS[k % len(SOURCE_BANDS)] for k in range(C)]
    n = classes * trials_per_class
    labels = np.repeat(np.arange(classes), trials_per_class)
    labels = labels[rng.permutation(n)]
    trials = np.empty((n, C, T))
    for i in range(n):
        src = np.stack([_band_noise(rng, 1, T, fs, b)[0] for b in bands])
        var = np.exp(jitter * rng.standard_normal(C))
        var[labels[i] % C] *= 1.0 + separation
        bg = np.cumsum(rng.standard_normal((C, T)), axis=-1)
        bg -= bg.mean(axis=-1, keepdims=True)
        bg /= np.sqrt(np.mean(bg ** 2)) + 1e-12
        trials[i] = mixing @ (np.sqrt(var)[:, None] * src) + background * (bg_mixing @ bg)
    sessions = (np.arange(n) >= n // 2).astype(np.int64)
    meta = DatasetMeta(
        fs=float(fs),
        channel_names=[f"ch{c}" for c in range(C)],
        class_names=[f"class{c}" for c in range(classes)],
        n_trials=n,
        T=T,
    )
    return Dataset(trials.astype(np.float32), labels.astype(np.int64), meta, sessions)


# --------------------------------------------------------------------------
# splits and metrics


@dataclass
class SplitPlan:
    """``assignment[i]`` is the fold of trial ``i``; holdout uses 0=train, 1=test."""

    assignment: np.ndarray
    kind: str
    k: int
    info: dict = field(default_factory=dict)

    def folds(self):
        """Yield ``(train_idx, test_idx)`` pairs."""
        if self.kind == "holdout":
            yield np.flatnonzero(self.assignment == 0), np.flatnonzero(self.assignment == 1)
            return
        for f in range(self.k):
            yield np.flatnonzero(self.assignment != f), np.flatnonzero(self.assignment == f)


def kfold_split(n, k, seed):
    """Shuffled k-fold plan with fold sizes differing by at most one."""
    if not 1 <= k <= n:
        raise ValueError(f"k-fold needs 1 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for f, idx in enumerate(np.array_split(perm, k)):
        assignment[idx] = f
    return SplitPlan(assignment, "kfold", k)


def holdout_split(sessions, train_sessions=None, test_sessions=None):
    """Assign whole sessions to train (0) or test (1)."""
    sessions = np.asarray(sessions)
    ids = sorted(set(sessions.tolist()))
    if len(ids) < 2:
        raise ValueError("holdout needs at least two sessions")
    train_s = [ids[0]] if train_sessions is None else list(train_sessions)
    test_s = [s for s in ids if s not in train_s] if test_sessions is None else list(test_sessions)
    if set(train_s) & set(test_s):
        raise ValueError("a session cannot be in both train and test")
    assignment = np.full(sessions.shape[0], -1, dtype=np.int64)
    assignment[np.isin(sessions, train_s)] = 0
    assignment[np.isin(sessions, test_s)] = 1
    return SplitPlan(assignment, "holdout", 2,
                     {"train_sessions": train_s, "test_sessions": test_s})


def validation_split(idx, fraction, seed):
    """Carve a seeded validation subset out of training indices."""
    idx = np.asarray(idx)
    perm = np.random.default_rng(seed).permutation(idx.size)
    n_val = max(1, int(round(fraction * idx.size)))
    return np.sort(idx[perm[n_val:]]), np.sort(idx[perm[:n_val]])


def metrics(predictions, labels, classes):
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (labels, predictions), 1)
    acc = float(np.trace(conf) / max(conf.sum(), 1))
    return acc, conf
