"""Sequential models: build from a config, train, save and load."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bpnet import config as cfgmod
from bpnet.data import Dataset, augment, batch_indices, train_val_split
from bpnet.errors import (
    BuildError,
    ConfigError,
    FormatError,
    MagicError,
    NumericError,
    ParameterError,
    ShapeError,
    TruncatedError,
    UsageError,
    VersionError,
)
from bpnet.layers import (
    LSTM,
    ActivationLayer,
    Conv2D,
    Dense,
    Embedding,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2D,
    Softmax,
)
from bpnet.losses_optim import Optimizer, cross_entropy, mse_weight_decay
from bpnet.tensor import make_rng

log = logging.getLogger(__name__)

MAGIC = b"BPNN"
FORMAT_VERSION = 1

# keys in a layer entry that name its input size; checked, then filled in
_DECLARED_INPUT = {"dense": "in_features", "conv2d": "in_channels", "lstm": "input_dim"}


def _make_layer(spec: dict, in_shape: tuple[int, ...], index: int) -> Layer:
    kind = spec["type"]
    mode = {k: spec[k] for k in ("projection", "alpha", "init_std") if k in spec}
    if kind in ("relu", "sigmoid", "tanh"):
        return ActivationLayer(kind)
    simple = {"maxpool": MaxPool2D, "gap": GlobalAvgPool, "flatten": Flatten, "softmax": Softmax}
    if kind in simple:
        return simple[kind]()
    if kind == "dense":
        if len(in_shape) != 1:
            raise BuildError(
                f"layer {index} (dense) needs a flat input but the previous layer "
                f"produces shape {in_shape}; insert a flatten layer"
            )
        return Dense(in_shape[0], spec["units"], activation=spec.get("activation", "identity"), **mode)
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise BuildError(f"layer {index} (conv2d) needs (H, W, C) input, got {in_shape}")
        return Conv2D(
            in_shape[2],
            spec["filters"],
            spec.get("kernel", 3),
            spec.get("stride", 1),
            spec.get("padding", "valid"),
            activation=spec.get("activation", "identity"),
            **mode,
        )
    if kind == "embedding":
        return Embedding(spec["vocab"], spec["dim"], **mode)
    if kind == "lstm":
        if len(in_shape) != 2:
            raise BuildError(f"layer {index} (lstm) needs (T, D) input, got {in_shape}")
        extra = {k: spec[k] for k in ("return_sequences", "forget_bias") if k in spec}
        return LSTM(in_shape[1], spec["units"], **mode, **extra)
    raise BuildError(f"layer {index}: unknown type {kind!r}")


def _declared_input(spec: dict, in_shape) -> int | None:
    key = _DECLARED_INPUT.get(spec["type"])
    if key is None or key not in spec:
        return None
    actual = {"dense": in_shape[-1], "conv2d": in_shape[-1], "lstm": in_shape[-1]}[spec["type"]]
    return spec[key] if spec[key] != actual else None


def with_input_shape(description: dict, input_shape) -> dict:
    """Copy of ``description`` for a new input shape, with inferred input sizes dropped."""
    layers = [
        {k: v for k, v in spec.items() if k != _DECLARED_INPUT.get(spec["type"])}
        for spec in description["layers"]
    ]
    return {**description, "input_shape": list(input_shape), "layers": layers}


def _describe(layer: Layer, i: int) -> str:
    return f"layer {i} ({layer.type_name})"


class Model:
    """Ordered layers plus the config they were built from."""

    def __init__(self, layers: list[Layer], input_shape, description: dict):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.description = description
        self.loss = description.get("loss", "cross_entropy")
        self.shapes = []
        shape = self.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1] if self.shapes else self.input_shape

    # -- parameters -------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable tensors keyed ``"<layer index>.<name>"`` in declaration order."""
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def weight_keys(self) -> list[str]:
        """Parameters subject to weight decay (weights, never biases)."""
        return [f"{i}.{k}" for i, layer in enumerate(self.layers) for k in layer.weight_names]

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            if layer.params[name].shape != value.shape:
                raise ShapeError(f"{key}: expected {layer.params[name].shape}, got {value.shape}")
            layer.params[name] = value.copy()

    # -- forward / backward ----------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"model expects input shape (N, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )

    def _fused_softmax(self) -> bool:
        return self.loss == "cross_entropy" and bool(self.layers) and isinstance(self.layers[-1], Softmax)

    def forward(self, x: np.ndarray, upto: int | None = None, check_finite: bool = False) -> np.ndarray:
        x = np.asarray(x)
        self._check_input(x)
        if x.dtype.kind == "f" and x.dtype.itemsize < 8:
            x = x.astype(np.float64)
        for i, layer in enumerate(self.layers[:upto]):
            x = layer.forward(x)
            if check_finite and not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite output from {_describe(layer, i)}")
        self._ran = upto if upto is not None else len(self.layers)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        ran = getattr(self, "_ran", None)
        if ran is None:
            raise UsageError("backward called before forward")
        self._ran = None
        for layer in reversed(self.layers[:ran]):
            grad = layer.backward(grad)
            if grad is None:
                break
        return grad

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Output before a trailing softmax (the model output otherwise)."""
        return self.forward(x, upto=-1 if self._fused_softmax() else None)

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.forward(x)
        self._ran = None
        return out

    def _targets(self, y: np.ndarray, out: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        if self.loss == "mse" and y.ndim == 1 and out.ndim == 2 and y.dtype.kind in "iu":
            onehot = np.zeros_like(out)
            onehot[np.arange(len(y)), y] = 1.0
            return onehot
        return y

    def data_loss(self, out: np.ndarray, y: np.ndarray):
        if self.loss == "cross_entropy":
            return cross_entropy(out, y)
        return mse_weight_decay(out, self._targets(y, out), reduction="mean")

    def loss_and_grads(self, x, y, lam: float = 0.0) -> float:
        """Forward + backward on one batch. Returns the objective including weight decay.

        Gradients (with decay folded in) are left in each layer's ``grads``.
        """
        out = self.logits(x)
        loss = self.data_loss(out, y)
        self.backward(loss.grad)
        value = loss.value
        if lam:
            params = self.parameters()
            grads = self.gradients()
            for key in self.weight_keys():
                value = value + 0.5 * lam * np.sum(params[key] ** 2)
                grads[key] += lam * params[key]
        return value

    def evaluate(self, x, y, batch_size: int = 256) -> tuple[float, float]:
        """Mean data loss and accuracy (NaN for non-classification targets)."""
        n = len(x)
        if n == 0:
            return math.nan, math.nan
        total = 0.0
        correct = 0
        classify = np.asarray(y).ndim == 1
        for idx in batch_indices(n, batch_size):
            out = self.logits(x[idx])
            self._ran = None
            total += float(self.data_loss(out, y[idx]).value) * len(idx)
            if classify:
                correct += int(np.sum(out.argmax(axis=-1) == y[idx]))
        return total / n, (correct / n if classify else math.nan)

    def first_nonfinite_layer(self, x) -> str | None:
        try:
            self.forward(x, check_finite=True)
        except NumericError as e:
            return str(e)
        finally:
            self._ran = None
        return None


def build(description: dict, seed: int | None = None) -> Model:
    """Validates ``description`` (see :mod:`bpnet.config`), resolves shapes, initializes."""
    desc = cfgmod.validate(description)
    shape = tuple(desc["input_shape"])
    layers = []
    resolved = []
    for i, spec in enumerate(desc["layers"]):
        if spec.get("alpha", 1) < 1:
            raise ParameterError(f"layer {i}: alpha must be >= 1")
        mismatch = _declared_input(spec, shape)
        if mismatch is not None:
            prev = _describe(layers[-1], i - 1) if layers else "the model input"
            raise BuildError(
                f"layer {i} ({spec['type']}) is declared with input size {mismatch} but "
                f"{prev} produces shape {shape} (last axis {shape[-1]})"
            )
        try:
            layer = _make_layer(spec, shape, i)
            new_shape = layer.output_shape(shape)
        except (ShapeError, ParameterError) as e:
            prev = _describe(layers[-1], i - 1) if layers else "the model input"
            raise BuildError(f"layer {i} ({spec['type']}) cannot follow {prev}: {e}") from None
        layers.append(layer)
        resolved.append(layer.config())
        shape = new_shape
    desc = {**desc, "layers": resolved}
    model = Model(layers, desc["input_shape"], desc)
    rng = make_rng(desc["seed"] if seed is None else seed)
    for layer in layers:
        layer.init_params(rng)
    return model


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.train_acc!r},{self.val_loss!r},{self.val_acc!r}"


METRICS_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"


def split_for_training(dataset: Dataset, cfg: dict, val: Dataset | None = None):
    if val is not None:
        return dataset, val
    return train_val_split(dataset, cfg["validation_split"], make_rng(cfg["shuffle_seed"]))


def train(model: Model, dataset: Dataset, cfg: dict | None = None, val: Dataset | None = None):
    """Mini-batch training; keeps the parameters with the lowest validation loss.

    ``cfg`` holds the training keys of a config (defaults from
    :data:`bpnet.config.DEFAULTS`). Without an explicit ``val`` set,
    ``validation_split`` of ``dataset`` is held out. Returns the per-epoch
    history; metrics are measured after each epoch, without augmentation.
    """
    cfg = {**cfgmod.DEFAULTS, **(cfg if cfg is not None else model.description)}
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    train_ds, val_ds = split_for_training(dataset, cfg, val)
    opt_cfg = dict(cfg["optimizer"])
    kind = opt_cfg.pop("kind")
    lam = opt_cfg.pop("lambda", 0.0)
    opt = Optimizer(kind, **opt_cfg).init(model.parameters())
    # separate stream from the split so each can be varied alone
    rng = make_rng(cfg["shuffle_seed"] + 1)
    aug = cfg.get("augment")
    history: list[EpochRecord] = []
    best = (math.inf, None)
    for epoch in range(1, cfg["epochs"] + 1):
        for idx in batch_indices(len(train_ds), cfg["batch_size"], rng):
            xb, yb = train_ds.x[idx], train_ds.y[idx]
            if aug:
                xb = augment(xb, rng, **{"flip": False, "crop": 0, **aug})
            value = model.loss_and_grads(xb, yb, lam)
            if not math.isfinite(value):
                where = model.first_nonfinite_layer(xb) or "loss"
                raise NumericError(f"epoch {epoch}: loss is {value}; first non-finite: {where}")
            opt.step(model.parameters(), model.gradients())
            # optimizer updated arrays in place; layers see the same objects
        tl, ta = model.evaluate(train_ds.x, train_ds.y)
        if val_ds is not None:
            vl, va = model.evaluate(val_ds.x, val_ds.y)
        else:
            vl, va = math.nan, math.nan
        rec = EpochRecord(epoch, tl, ta, vl, va)
        history.append(rec)
        log.info("epoch %d train_loss=%.6f train_acc=%.4f val_loss=%.6f val_acc=%.4f", *rec.__dict__.values())
        score = vl if val_ds is not None else tl
        if score < best[0]:
            best = (score, model.get_state())
    if best[1] is not None:
        model.set_state(best[1])
    return history


def write_metrics(path, history: list[EpochRecord]) -> None:
    lines = [METRICS_HEADER] + [r.csv_row() for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# model files
#
#   "BPNN" | u8 version | u32 descriptor length | descriptor (UTF-8 JSON)
#   then per parameter tensor, in declaration order:
#   u32 element count | count x f64
# all integers and floats little-endian


def save(model: Model, path) -> None:
    desc = json.dumps(model.description, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    for p in model.parameters().values():
        buf.write(struct.pack("<I", p.size))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _take(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise TruncatedError(f"model file truncated reading {what} at byte {pos}", pos)
    return buf[pos : pos + n]


def load(path) -> Model:
    buf = Path(path).read_bytes()
    if _take(buf, 0, 4, "magic") != MAGIC:
        raise MagicError(f"{path}: not a model file (magic {buf[:4]!r})")
    (version,) = struct.unpack("<B", _take(buf, 4, 1, "version"))
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (n,) = struct.unpack("<I", _take(buf, 5, 4, "descriptor length"))
    try:
        desc = json.loads(_take(buf, 9, n, "descriptor").decode())
        model = build(desc)
    except (json.JSONDecodeError, UnicodeDecodeError, ConfigError, BuildError) as e:
        raise FormatError(f"{path}: unreadable architecture descriptor: {e}") from None
    pos = 9 + n
    state = {}
    for key, p in model.parameters().items():
        (count,) = struct.unpack("<I", _take(buf, pos, 4, f"{key} length"))
        pos += 4
        if count != p.size:
            raise ShapeError(f"{path}: {key} has {count} elements, architecture needs {p.size}")
        raw = _take(buf, pos, 8 * count, key)
        state[key] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(p.shape)
        pos += 8 * count
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} unexpected trailing bytes at byte {pos}")
    model.set_state(state)
    return model
