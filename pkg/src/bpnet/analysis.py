"""Cost accounting and the two correctness oracles.

FLOP convention: one multiply-accumulate is 2 FLOPs. Bias additions are not
counted. Element-wise activations, pooling and softmax cost 1 FLOP per output
element. All figures are for a single forward pass of one sample:

===========  ===============================================================
layer        forward FLOPs
===========  ===============================================================
dense full   ``2*D*K``
dense bil.   ``2*k1*d1*d2 + 2*k1*d2*(alpha*k2)``  (``w1 @ x`` first)
conv full    ``P * 2*(kh*kw*c)*filters``  for ``P`` output positions
conv bil.    ``P * (2*(alpha*k1)*(kh*kw)*c + 2*(alpha*k1)*c*(alpha*k2))``
embedding    full: 0; bilinear: ``T * alpha*dim`` (one outer product per token)
lstm         per step: the 8 maps as above, plus ``9*H`` element-wise ops
===========  ===============================================================

Activation memory is ``batch * sum(layer output elements) * element width``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from bpnet.errors import NumericError, ParameterError, UsageError
from bpnet.layers import (
    LSTM,
    Conv2D,
    Dense,
    Embedding,
    Flatten,
    Layer,
    MaxPool2D,
)
from bpnet.network import Model, build, with_input_shape
from bpnet.tensor import make_rng

CSV_HEADER = ["layer", "mode", "alpha", "params", "flops", "activation_bytes"]


@dataclass
class LayerCost:
    layer: str
    mode: str
    alpha: int
    params: int
    flops: int
    activation_bytes: int


@dataclass
class CostReport:
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_activation_bytes(self) -> int:
        return sum(r.activation_bytes for r in self.rows)

    @property
    def params_excluding_last(self) -> int:
        """Parameter total without the final parametrized layer (the classifier)."""
        last = next((r for r in reversed(self.rows) if r.params), None)
        return self.total_params - (last.params if last else 0)

    def to_csv(self, exclude_last: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        rows = self.rows
        if exclude_last:
            idx = max((i for i, r in enumerate(rows) if r.params), default=None)
            rows = [r for i, r in enumerate(rows) if i != idx]
        for r in rows:
            w.writerow([r.layer, r.mode, r.alpha, r.params, r.flops, r.activation_bytes])
        w.writerow(
            [
                "total",
                "",
                "",
                sum(r.params for r in rows),
                sum(r.flops for r in rows),
                sum(r.activation_bytes for r in rows),
            ]
        )
        return buf.getvalue()

    def table(self) -> str:
        widths = [max(len(h), 8) for h in CSV_HEADER]
        cells = [CSV_HEADER] + [
            [r.layer, r.mode, str(r.alpha), f"{r.params:,}", f"{r.flops:,}", f"{r.activation_bytes:,}"]
            for r in self.rows
        ]
        cells.append(
            ["total", "", "", f"{self.total_params:,}", f"{self.total_flops:,}", f"{self.total_activation_bytes:,}"]
        )
        widths = [max(w, *(len(c[i]) for c in cells)) for i, w in enumerate(widths)]
        return "\n".join("  ".join(c.rjust(widths[i]) for i, c in enumerate(row)) for row in cells)


def _mode(layer: Layer) -> str:
    return getattr(layer, "projection", "-")


def _bilinear_flops(k1: int, d1: int, d2: int, k2: int) -> int:
    # (k1 x d1)(d1 x d2) then (k1 x d2)(d2 x k2)
    return 2 * k1 * d1 * d2 + 2 * k1 * d2 * k2


def layer_flops(layer: Layer, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    out_elems = math.prod(out_shape)
    if isinstance(layer, Dense):
        act = out_elems if layer.activation.kind != "identity" else 0
        if layer.projection == "full":
            return 2 * layer.in_features * layer.units + act
        d1, d2 = layer.in_factors
        k1, k2 = layer.out_factors
        return _bilinear_flops(k1, d1, d2, k2) + act
    if isinstance(layer, Conv2D):
        positions = out_shape[0] * out_shape[1]
        s = layer.kernel[0] * layer.kernel[1]
        act = out_elems if layer.activation.kind != "identity" else 0
        if layer.projection == "full":
            return positions * 2 * s * layer.in_channels * layer.filters + act
        k1, k2 = layer.out_factors
        return positions * _bilinear_flops(k1, s, layer.in_channels, k2) + act
    if isinstance(layer, Embedding):
        tokens = math.prod(in_shape)
        return 0 if layer.projection == "full" else tokens * layer.out_features
    if isinstance(layer, LSTM):
        steps = in_shape[0]
        hsz = layer.hidden_size
        if layer.projection == "full":
            maps = 4 * (2 * layer.input_dim * hsz + 2 * hsz * hsz)
        else:
            d1, d2 = layer.in_factors
            h1, hh = layer.hidden_factors
            maps = 4 * (_bilinear_flops(h1, d1, d2, hh) + _bilinear_flops(h1, h1, hh, hh))
        return steps * (maps + 9 * hsz)
    if isinstance(layer, Flatten):
        return 0
    # activations, pooling, softmax
    return out_elems


def cost_report(model: Model, batch: int = 32, width: int = 4) -> CostReport:
    """Per-layer parameters, forward FLOPs and activation bytes."""
    if batch < 1 or width < 1:
        raise ParameterError("batch and element width must be positive")
    rows = []
    in_shape = model.input_shape
    for i, (layer, out_shape) in enumerate(zip(model.layers, model.shapes)):
        rows.append(
            LayerCost(
                layer=f"{i}:{layer.type_name}",
                mode=_mode(layer),
                alpha=getattr(layer, "alpha", 1),
                params=layer.num_params(),
                flops=layer_flops(layer, in_shape, out_shape),
                activation_bytes=batch * math.prod(out_shape) * width,
            )
        )
        in_shape = out_shape
    return CostReport(rows)


def count_params(model: Model) -> CostReport:
    return cost_report(model)


def estimate_flops(model: Model, input_shape=None) -> CostReport:
    """FLOPs for ``input_shape`` (defaults to the model's declared input shape)."""
    if input_shape is not None and tuple(input_shape) != model.input_shape:
        model = build(with_input_shape(model.description, input_shape))
    return cost_report(model)


def estimate_activation_memory(model: Model, batch: int = 32, width: int = 4) -> CostReport:
    return cost_report(model, batch, width)


# --------------------------------------------------------------------------
# gradient check


# Default finite-difference tolerances. Recurrent layers get a looser bound:
# BPTT produces many tiny gradient entries whose central differences are
# dominated by rounding in the loss.
GRAD_TOLERANCE = 1e-5
LSTM_GRAD_TOLERANCE = 1e-4


def default_tolerance(layer: Layer) -> float:
    return LSTM_GRAD_TOLERANCE if isinstance(layer, LSTM) else GRAD_TOLERANCE


@dataclass
class TensorCheck:
    name: str
    worst: float
    probes: int
    excluded: int
    tolerance: float = GRAD_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


@dataclass
class GradCheckReport:
    tensors: list[TensorCheck]
    # a relu input was exactly 0 at the unperturbed point
    at_kink: bool = False

    @property
    def worst(self) -> float:
        return max((t.worst for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    @property
    def excluded(self) -> int:
        return sum(t.excluded for t in self.tensors)

    def by_layer(self) -> dict[str, tuple[float, float]]:
        """``{layer index or "input": (worst error, tolerance)}``."""
        out: dict[str, tuple[float, float]] = {}
        for t in self.tensors:
            key = t.name.split(".", 1)[0]
            worst = max(out.get(key, (0.0, 0.0))[0], t.worst)
            out[key] = (worst, t.tolerance)
        return out


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _signature(model: Model) -> tuple:
    """Discrete branch decisions of the last forward (relu signs, max-pool winners)."""
    sig = []
    for layer in model.layers:
        for z in layer.kink_inputs():
            sig.append((z > 0).tobytes())
        if isinstance(layer, MaxPool2D) and layer._cache is not None:
            sig.append(layer._cache[1].tobytes())
    return tuple(sig)


def _at_kink(model: Model) -> bool:
    return any(np.any(z == 0) for layer in model.layers for z in layer.kink_inputs())


# Probe losses are evaluated in extended precision where the platform has it,
# so rounding noise in L(p + h) - L(p - h) stays far below the tolerance.
PROBE_DTYPE = (
    np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64
)


def grad_check(
    model: Model | Layer,
    x,
    y=None,
    tolerance: float | None = None,
    step: float = 1e-6,
    lam: float = 0.0,
    max_probes: int | None = None,
    seed: int = 0,
    check_input: bool = True,
) -> GradCheckReport:
    """Compares backprop gradients with central differences.

    A bare layer is checked under the loss ``1/2 ||layer(x) - y||^2`` (``y``
    random when omitted); a model uses its own loss. ``max_probes`` limits the
    coordinates probed per tensor (a seeded random subset). Without an
    explicit ``tolerance`` each tensor gets :func:`default_tolerance` of its
    layer, and the input gradient the loosest of those. Probes whose two
    perturbations disagree on a relu sign or a max-pool winner straddle a kink;
    they are excluded and counted. A relu input sitting exactly at 0 is
    reported through ``at_kink``.
    """
    rng = make_rng(seed)
    if isinstance(model, Layer):
        model = _wrap_layer(model, x)
        if y is None:
            out = model.predict(np.asarray(x))
            y = rng.normal(size=out.shape)
    if y is None:
        raise UsageError("grad_check on a model needs targets")
    x = np.array(x, dtype=np.float64 if np.asarray(x).dtype.kind == "f" else None)
    y = np.asarray(y)

    model.loss_and_grads(x, y, lam)
    analytic = {k: g.copy() for k, g in model.gradients().items()}
    if check_input and x.dtype.kind == "f":
        out = model.logits(x)
        analytic["input"] = model.backward(model.data_loss(out, y).grad)
    model.logits(x)
    model._ran = None
    kink = _at_kink(model)

    saved = model.get_state()
    dtype = PROBE_DTYPE
    model.set_state({k: v.astype(dtype) for k, v in saved.items()})
    xw = x.astype(dtype) if x.dtype.kind == "f" else x
    yw = y.astype(dtype) if y.dtype.kind == "f" else y
    targets = list(model.parameters().items())
    if "input" in analytic:
        targets.append(("input", xw))

    def loss():
        out = model.logits(xw)
        model._ran = None
        value = model.data_loss(out, yw).value
        if lam:
            params = model.parameters()
            for k in model.weight_keys():
                value = value + 0.5 * lam * np.sum(params[k] ** 2)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} while probing")
        return value

    if tolerance is None:
        layer_tol = [default_tolerance(layer) for layer in model.layers]
    else:
        layer_tol = [tolerance] * len(model.layers)

    def tol_for(name):
        if name == "input":
            return max(layer_tol, default=GRAD_TOLERANCE)
        return layer_tol[int(name.split(".", 1)[0])]

    results = []
    try:
        for name, arr in targets:
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_probes is not None and flat.size > max_probes:
                idx = np.sort(rng.choice(flat.size, max_probes, replace=False))
            worst, excluded = 0.0, 0
            a_flat = analytic[name].reshape(-1)
            for j in idx:
                old = flat[j]
                flat[j] = old + step
                lp = loss()
                sp = _signature(model)
                flat[j] = old - step
                lm = loss()
                sm = _signature(model)
                flat[j] = old
                if sp != sm:
                    excluded += 1
                    continue
                num = float((lp - lm) / (2 * dtype(step)))
                worst = max(worst, float(relative_error(a_flat[j], num)))
            results.append(TensorCheck(name, worst, len(idx), excluded, tol_for(name)))
    finally:
        model.set_state(saved)
    return GradCheckReport(results, at_kink=kink)


def _wrap_layer(layer: Layer, x) -> Model:
    x = np.asarray(x)
    return Model([layer], x.shape[1:], {"loss": "mse", "layers": [layer.config()]})


# --------------------------------------------------------------------------
# equivalence check


@dataclass
class EquivalenceResult:
    max_deviation: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def default_probe_shape(layer: Layer) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        return (layer.in_features,)
    if isinstance(layer, Conv2D):
        return (layer.kernel[0] + 3, layer.kernel[1] + 3, layer.in_channels)
    if isinstance(layer, LSTM):
        return (5, layer.input_dim)
    raise ParameterError(f"no default probe shape for {layer.type_name}")


def equivalence_check(
    layer: Layer, trials: int = 100, tolerance: float = 1e-10, input_shape=None, seed: int = 0
) -> EquivalenceResult:
    """Max |bilinear output - output of the expanded full layer| over random inputs.

    Embeddings are compared on every token id instead of random inputs.
    """
    if getattr(layer, "projection", None) != "bilinear":
        raise UsageError(f"{layer.type_name} has no bilinear projection to expand")
    full = layer.expand_to_full()
    if isinstance(layer, Embedding):
        ids = np.arange(layer.vocab)
        dev = float(np.max(np.abs(layer.forward(ids) - full.forward(ids))))
        layer._cache = full._cache = None
        return EquivalenceResult(dev, tolerance, layer.vocab)
    shape = tuple(input_shape) if input_shape is not None else default_probe_shape(layer)
    x = make_rng(seed).normal(size=(trials, *shape))
    dev = float(np.max(np.abs(layer.forward(x) - full.forward(x))))
    layer._cache = full._cache = None
    return EquivalenceResult(dev, tolerance, trials)


def model_equivalence(model: Model, trials: int = 100, tolerance: float = 1e-10, seed: int = 0):
    """``{layer label: EquivalenceResult}`` for every bilinear layer of ``model``."""
    out = {}
    in_shape = model.input_shape
    for i, (layer, out_shape) in enumerate(zip(model.layers, model.shapes)):
        if getattr(layer, "projection", None) == "bilinear":
            out[f"{i}:{layer.type_name}"] = equivalence_check(layer, trials, tolerance, in_shape, seed)
        in_shape = out_shape
    return out


def is_parametrized(model: Model) -> bool:
    return any(layer.params for layer in model.layers)


__all__ = [
    "CSV_HEADER",
    "CostReport",
    "EquivalenceResult",
    "GradCheckReport",
    "LayerCost",
    "cost_report",
    "count_params",
    "equivalence_check",
    "estimate_activation_memory",
    "estimate_flops",
    "grad_check",
    "default_tolerance",
    "model_equivalence",
    "relative_error",
]
