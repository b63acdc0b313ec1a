"""Network assembly, optimizer, training loop and checkpoints."""
import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import euclid, layers
from .errors import ConfigError, NumericalError
from .euclid import ConvSpec

O_GRID = (4, 8, 12, 16, 20, 22, 24, 28, 32, 36)
CHECKPOINT_SCHEMA = 1


@dataclass
class ModelConfig:
    """``w``-CSPNet with ``m`` bands, ``n`` CSP blocks and an ``l``-layer head.

    ``o`` holds one output dimension per block. ``conv`` is ``(p, q, r)`` and
    must be given exactly when ``w > 1``. ``bias`` adds bias vectors to the
    convolution and dense layers (the reference architecture has none).
    ``free_o`` lifts the restriction of ``o`` to the standard grid, for small
    test configurations.
    """

    w: int
    m: int
    n: int
    l: int
    o: list
    classes: int
    channels: int
    conv: ConvSpec | None = None
    use_rbn: bool = True
    eps_reeig: float = layers.REEIG_EPS
    bias: bool = False
    free_o: bool = False

    def __post_init__(self):
        if isinstance(self.o, int):
            self.o = [self.o] * self.n
        self.o = [int(v) for v in self.o]
        if isinstance(self.conv, (list, tuple)):
            self.conv = ConvSpec(*self.conv)
        elif isinstance(self.conv, dict):
            self.conv = ConvSpec(**self.conv)

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"invalid model config: {name} {msg}", field=name)

        for name in ("w", "m", "classes", "channels"):
            if getattr(self, name) < 1:
                bad(name, "must be positive")
        if self.n not in (1, 3):
            bad("n", f"must be 1 or 3, got {self.n}")
        if self.l not in (1, 3):
            bad("l", f"must be 1 or 3, got {self.l}")
        if len(self.o) != self.n:
            bad("o", f"needs {self.n} entries, got {len(self.o)}")
        for v in self.o:
            if v < 1 or (not self.free_o and v not in O_GRID):
                bad("o", f"value {v} is not in the allowed grid {O_GRID}")
        if (self.conv is not None) != (self.w > 1):
            bad("conv", "must be given if and only if w > 1")
        if self.conv is not None:
            try:
                self.conv.validate(self.w, self.m)
            except ValueError as exc:
                bad("conv", str(exc))
        if not self.eps_reeig > 0:
            bad("eps_reeig", "must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["conv"] = None if self.conv is None else [self.conv.p, self.conv.q, self.conv.r]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields {sorted(extra)}",
                              field=sorted(extra)[0])
        return cls(**d)

    def name(self):
        s = f"{self.w}-CSPNet^({self.m},{self.n},{self.l})"
        if self.conv is not None:
            s += f"@({self.conv.p},{self.conv.q},{self.conv.r})"
        return s


@dataclass
class TrainSpec:
    lr0: float = 0.01
    decay: float = 0.99
    epochs: int = 60
    patience: int = 15
    batch: int = 28
    seed: int = 0
    momentum: float = 0.9

    def validate(self):
        for name in ("lr0", "decay", "epochs", "patience", "batch"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train spec: {name} must be positive", field=name)
        if self.patience > self.epochs:
            raise ConfigError("train spec: patience cannot exceed epochs", field="patience")
        return self

    def lr(self, epoch):
        return self.lr0 * self.decay ** epoch


# --------------------------------------------------------------------------
# parameter bookkeeping


def _head_dims(cfg: ModelConfig):
    o_last = cfg.o[-1]
    if cfg.conv is None:
        d_in = cfg.m * o_last * o_last
    else:
        Wo, Fo, r = cfg.conv.output_shape(cfg.w, cfg.m)
        d_in = Wo * Fo * r
    if cfg.l == 1:
        return [d_in, cfg.classes]
    return [d_in, max(1, d_in // 2), max(1, d_in // 4), cfg.classes]


def parameter_shapes(cfg: ModelConfig):
    """Ordered ``(name, shape, kind)`` for every trainable tensor."""
    out = []
    c_in = cfg.channels
    for k, o in enumerate(cfg.o):
        out.append((f"bimap{k}.W", (cfg.m, o, c_in), "stiefel"))
        if cfg.use_rbn:
            out.append((f"rbn{k}.G", (o, o), "spd"))
        c_in = o
    o = cfg.o[-1]
    if cfg.conv is not None:
        c = cfg.conv
        out.append(("conv.weight", (c.r, c.q, c.p, o * o), "euclid"))
        if cfg.bias:
            out.append(("conv.bias", (c.r,), "euclid"))
    dims = _head_dims(cfg)
    for i in range(len(dims) - 1):
        out.append((f"dense{i}.weight", (dims[i + 1], dims[i]), "euclid"))
        if cfg.bias:
            out.append((f"dense{i}.bias", (dims[i + 1],), "euclid"))
    return out


@dataclass
class ParameterCount:
    items: list  # (name, count)
    total: int


def parameter_count(cfg: ModelConfig) -> ParameterCount:
    """Itemized number of trainable scalars of ``cfg``."""
    cfg.validate()
    items = [(name, math.prod(shape)) for name, shape, _ in parameter_shapes(cfg)]
    return ParameterCount(items, sum(c for _, c in items))


# --------------------------------------------------------------------------
# the network


class Model:
    """Tensor-CSPNet instance: parameters, RBN statistics and forward/backward."""

    def __init__(self, cfg: ModelConfig, params, buffers):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.kinds = {name: kind for name, _, kind in parameter_shapes(cfg)}
        self.velocity = {}
        self._tape = None

    # -- construction --------------------------------------------------
    @classmethod
    def build(cls, cfg: ModelConfig, seed=0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}
        for name, shape, kind in parameter_shapes(cfg):
            if kind == "stiefel":
                params[name] = layers.stiefel_init(shape[1], shape[2], rng, bands=shape[0])
            elif kind == "spd":
                params[name] = np.eye(shape[0])
                k = name[3:name.index(".")]
                buffers[f"rbn{k}.running_mean"] = np.broadcast_to(
                    np.eye(shape[0]), (cfg.m,) + shape).copy()
            elif name == "conv.weight":
                r, q, p, blk = shape
                params[name] = euclid.glorot_uniform(rng, shape, q * p * blk, r)
            elif name.endswith(".weight"):
                params[name] = euclid.glorot_uniform(rng, shape, shape[1], shape[0])
            else:
                params[name] = np.zeros(shape)
        return cls(cfg, params, buffers)

    def layer_names(self):
        """Layer sequence, one entry per architectural layer."""
        names = []
        for k in range(self.cfg.n):
            names.append(f"bimap{k}")
            if self.cfg.use_rbn:
                names.append(f"rbn{k}")
            names.append(f"reeig{k}")
        names.append("log")
        if self.cfg.conv is not None:
            names.append("conv")
        names += [f"dense{i}" for i in range(self.cfg.l)]
        return names

    def n_trainable(self):
        return sum(int(v.size) for v in self.params.values())

    # -- forward / backward ----------------------------------------------
    def _check_input(self, x):
        cfg = self.cfg
        want = (cfg.w, cfg.m, cfg.channels, cfg.channels)
        if x.ndim != 5 or x.shape[1:] != want:
            raise ValueError(f"expected input of shape (B, {want}), got {x.shape}")

    def forward(self, x, mode="train", frozen_means=None, update_stats=True):
        """Logits ``(B, classes)`` for a ``(B, W, F, C, C)`` batch.

        ``frozen_means`` maps block index to per-band means that replace the
        batch statistics in train mode (running means are then left alone).
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        tape = []
        means = {}
        h = x
        for k in range(cfg.n):
            h, ctx = layers.bimap_forward(self.params[f"bimap{k}.W"], h)
            tape.append(("bimap", k, ctx))
            if cfg.use_rbn:
                state = layers.RbnState(self.buffers[f"rbn{k}.running_mean"],
                                        self.params[f"rbn{k}.G"], floor=cfg.eps_reeig)
                fixed = None if frozen_means is None else frozen_means[k]
                h, ctx = layers.rbn_forward(h, state, mode, batch_mean=fixed,
                                            update=update_stats and fixed is None)
                self.buffers[f"rbn{k}.running_mean"] = state.running_mean
                means[k] = ctx["mean"]
                tape.append(("rbn", k, ctx))
            h, ctx = layers.reeig_forward(h, cfg.eps_reeig)
            tape.append(("reeig", k, ctx))
        h, ctx = layers.logeig_forward(h)
        tape.append(("log", 0, ctx))
        h = euclid.flatten_concat(h)
        if cfg.conv is not None:
            h, ctx = euclid.conv2d_blockwise_forward(
                h, cfg.conv, self.params["conv.weight"], self.params.get("conv.bias"))
            tape.append(("conv", 0, ctx))
        B = x.shape[0]
        h = h.reshape(B, -1)
        for i in range(cfg.l):
            h, ctx = euclid.dense_forward(h, self.params[f"dense{i}.weight"],
                                          self.params.get(f"dense{i}.bias"))
            tape.append(("dense", i, ctx))
            if i < cfg.l - 1:
                h, mask = euclid.relu_forward(h)
                tape.append(("relu", i, mask))
        self._tape = tape
        self.last_means = means
        return h

    def backward(self, grad_logits):
        """Gradients for every parameter; SPD biases get Riemannian gradients."""
        if self._tape is None:
            raise RuntimeError("backward called before forward")
        cfg = self.cfg
        grads = {}
        g = grad_logits
        shape_grid = None
        for kind, k, ctx in reversed(self._tape):
            if kind == "relu":
                g = euclid.relu_backward(ctx, g)
            elif kind == "dense":
                g, gw, gb = euclid.dense_backward(ctx, g)
                grads[f"dense{k}.weight"] = gw
                if gb is not None:
                    grads[f"dense{k}.bias"] = gb
            elif kind == "conv":
                B = g.shape[0]
                Wo, Fo, r = cfg.conv.output_shape(cfg.w, cfg.m)
                g, gw, gb = euclid.conv2d_blockwise_backward(ctx, g.reshape(B, Wo, Fo, r))
                grads["conv.weight"] = gw
                if gb is not None:
                    grads["conv.bias"] = gb
            elif kind == "log":
                o = cfg.o[-1]
                shape_grid = (g.shape[0], cfg.w, cfg.m, o, o)
                g = layers.logeig_backward(ctx, g.reshape(shape_grid))
            elif kind == "reeig":
                g = layers.reeig_backward(ctx, g)
            elif kind == "rbn":
                g, grads[f"rbn{k}.G"] = layers.rbn_backward(ctx, g)
            elif kind == "bimap":
                g, grads[f"bimap{k}.W"] = layers.bimap_backward(ctx, g)
        return {name: grads[name] for name in self.params}

    def loss_and_grads(self, x, y, **kw):
        logits = self.forward(x, "train", **kw)
        loss, g = euclid.softmax_ce(logits, y)
        return loss, self.backward(g)

    def predict_logits(self, x, chunk=256):
        x = np.asarray(x, dtype=np.float64)
        outs = [self.forward(x[i:i + chunk], "eval") for i in range(0, len(x), chunk)]
        return np.concatenate(outs, axis=0)

    def predict(self, x):
        return np.argmax(self.predict_logits(x), axis=1)

    # -- optimizer ---------------------------------------------------------
    def sgd_step(self, grads, lr, momentum=0.9):
        """Manifold-aware SGD step.

        Stiefel weights are retracted, SPD biases follow the exponential map
        and Euclidean tensors use heavy-ball momentum.
        """
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}",
                                     residual=float(np.nanmax(np.abs(g))))
        for name, g in grads.items():
            kind = self.kinds[name]
            if kind == "stiefel":
                self.params[name] = layers.stiefel_retract(self.params[name], g, lr)
            elif kind == "spd":
                self.params[name] = layers.spd_step(self.params[name], g, lr)
            else:
                v = momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
                self.params[name] = self.params[name] - lr * v

    # -- state -------------------------------------------------------------
    def state(self):
        return copy.deepcopy((self.params, self.buffers, self.velocity))

    def load_state(self, state):
        self.params, self.buffers, self.velocity = copy.deepcopy(state)


# --------------------------------------------------------------------------
# training


@dataclass
class History:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self):
        return asdict(self)


def _batches(n, size, rng, min_size):
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def evaluate(model: Model, x, y):
    """Mean loss and accuracy in eval mode."""
    logits = model.predict_logits(x)
    loss, _ = euclid.softmax_ce(logits, y)
    return loss, float(np.mean(np.argmax(logits, axis=1) == y))


def train(model: Model, train_set, valid_set, spec: TrainSpec, log=None):
    """Mini-batch training with early stopping on the validation loss.

    The parameters (and RBN statistics) of the best validation epoch are
    restored before returning.
    """
    spec.validate()
    xt, yt = train_set
    xv, yv = valid_set
    if len(xt) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    for labels in (yt, yv):
        if np.any(labels < 0) or np.any(labels >= model.cfg.classes):
            raise ValueError(f"labels must lie in [0, {model.cfg.classes})")
    rng = np.random.default_rng(spec.seed)
    hist = History()
    best = (math.inf, None)
    stale = 0
    min_size = 2 if model.cfg.use_rbn else 1
    if model.cfg.use_rbn and len(xt) < 2:
        raise ValueError("Riemannian BN needs at least 2 training samples")
    for epoch in range(spec.epochs):
        lr = spec.lr(epoch)
        losses = []
        for idx in _batches(len(xt), spec.batch, rng, min_size):
            loss, grads = model.loss_and_grads(xt[idx], yt[idx])
            model.sgd_step(grads, lr, spec.momentum)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(xt))
        v_loss, v_acc = evaluate(model, xv, yv)
        hist.records.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                             "valid_loss": v_loss, "valid_acc": v_acc})
        if log is not None:
            log(hist.records[-1])
        if v_loss < best[0]:
            best = (v_loss, model.state())
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                hist.stopped_early = True
                break
    model.load_state(best[1])
    return hist


# --------------------------------------------------------------------------
# checkpoints


def write_tensors(path, meta, tensors):
    """Write ``manifest.json`` + ``tensors.bin`` (float64 little-endian) to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(path / "tensors.bin", "wb") as fh:
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            index.append({"name": name, "shape": list(data.shape), "offset": offset,
                          "nbytes": data.nbytes})
            offset += data.nbytes
    manifest = dict(meta, tensors=index)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_tensors(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "tensors.bin").read_bytes()
    tensors = {}
    for ent in manifest["tensors"]:
        end = ent["offset"] + ent["nbytes"]
        if end > len(blob):
            raise ValueError(f"tensor {ent['name']} runs past the end of tensors.bin")
        arr = np.frombuffer(blob[ent["offset"]:end], dtype="<f8")
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float64)
    return manifest, tensors


def save_checkpoint(model: Model, path, extra=None):
    meta = {"schema_version": CHECKPOINT_SCHEMA, "kind": "checkpoint",
            "config": model.cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    tensors = [(f"param/{k}", v) for k, v in model.params.items()]
    tensors += [(f"buffer/{k}", v) for k, v in model.buffers.items()]
    write_tensors(path, meta, tensors)


def load_checkpoint(path):
    """Return ``(model, manifest)``."""
    manifest, tensors = read_tensors(path)
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA or manifest.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a schema-{CHECKPOINT_SCHEMA} checkpoint")
    cfg = ModelConfig.from_dict(manifest["config"]).validate()
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer/")}
    expected = {name: shape for name, shape, _ in parameter_shapes(cfg)}
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError(f"checkpoint tensor {name} missing or mis-shaped")
    return Model(cfg, params, buffers), manifest
