"""Losses and the SGD / Adam / RMSprop optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bpnet.errors import ParameterError, ShapeError, UsageError
from bpnet.layers import softmax
from bpnet.tensor import as_float


@dataclass
class LossValue:
    # numpy scalar in the precision of the inputs
    value: np.floating
    grad: np.ndarray
    # decay gradients, one per weight tensor passed in, in the same order
    weight_grads: list[np.ndarray] = field(default_factory=list)


def mse_weight_decay(h, y, lam: float = 0.0, weights=(), reduction: str = "sum") -> LossValue:
    """``1/2 ||h - y||^2 + lam/2 * sum ||w||^2``.

    With ``reduction="mean"`` the squared-error term (and its gradient) is
    divided by the batch size ``h.shape[0]``; the decay term is not.
    """
    h = as_float(h)
    y = as_float(y)
    if h.shape != y.shape:
        raise ShapeError(f"prediction shape {h.shape} != target shape {y.shape}")
    if lam < 0:
        raise ParameterError(f"weight decay must be >= 0, got {lam}")
    diff = h - y
    if reduction == "mean":
        scale = 1.0 / h.shape[0]
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ParameterError(f"unknown reduction {reduction!r}")
    value = 0.5 * scale * np.sum(diff * diff)
    for w in weights:
        value = value + 0.5 * lam * np.sum(w * w)
    return LossValue(value, scale * diff, [lam * w for w in weights])


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> LossValue:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_float(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    value = np.mean(logsumexp - shifted[rows, labels])
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return LossValue(value, grad / n)


OPTIMIZER_DEFAULTS = {
    "sgd": {"lr": 0.01},
    "adam": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "rmsprop": {"lr": 0.001, "rho": 0.9, "eps": 1e-8},
}


class Optimizer:
    """Optimizer state for one model. Call :meth:`init` before stepping.

    Parameters and gradients are dicts keyed by the same names; updates are
    applied in place. Weight decay, if any, must already be in the gradients.
    """

    def __init__(self, kind: str = "adam", **hyper):
        if kind not in OPTIMIZER_DEFAULTS:
            raise ParameterError(f"unknown optimizer {kind!r}")
        unknown = set(hyper) - set(OPTIMIZER_DEFAULTS[kind])
        if unknown:
            raise ParameterError(f"{kind} does not take {sorted(unknown)}")
        self.kind = kind
        self.hyper = {**OPTIMIZER_DEFAULTS[kind], **hyper}
        if self.hyper["lr"] <= 0:
            raise ParameterError("learning rate must be positive")
        self.t = 0
        self.m: dict[str, np.ndarray] | None = None
        self.v: dict[str, np.ndarray] | None = None

    @property
    def lr(self) -> float:
        return self.hyper["lr"]

    def init(self, params: dict[str, np.ndarray]) -> "Optimizer":
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        return self

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.m is None:
            raise UsageError("optimizer state not initialized; call init(params) first")
        self.t += 1
        for name in params:
            p, g = params[name], grads[name]
            if p.shape != g.shape or self.m[name].shape != p.shape:
                raise ShapeError(f"{name}: parameter {p.shape}, gradient {g.shape}")
            p -= self._update(name, g)

    def _update(self, name: str, g: np.ndarray) -> np.ndarray:
        hp = self.hyper
        if self.kind == "sgd":
            return hp["lr"] * g
        if self.kind == "adam":
            m = self.m[name]
            v = self.v[name]
            m *= hp["beta1"]
            m += (1.0 - hp["beta1"]) * g
            v *= hp["beta2"]
            v += (1.0 - hp["beta2"]) * g * g
            m_hat = m / (1.0 - hp["beta1"] ** self.t)
            v_hat = v / (1.0 - hp["beta2"] ** self.t)
            return hp["lr"] * m_hat / (np.sqrt(v_hat) + hp["eps"])
        v = self.v[name]
        v *= hp["rho"]
        v += (1.0 - hp["rho"]) * g * g
        return hp["lr"] * g / (np.sqrt(v) + hp["eps"])


def sgd_step(state: Optimizer, params, grads) -> None:
    _checked(state, "sgd").step(params, grads)


def adam_step(state: Optimizer, params, grads) -> None:
    _checked(state, "adam").step(params, grads)


def rmsprop_step(state: Optimizer, params, grads) -> None:
    _checked(state, "rmsprop").step(params, grads)


def _checked(state: Optimizer, kind: str) -> Optimizer:
    if state.kind != kind:
        raise UsageError(f"{kind}_step given a {state.kind} optimizer state")
    return state
