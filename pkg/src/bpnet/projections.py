"""Full and bilinear affine maps.

A full projection maps a row vector ``x`` of length ``D`` to ``phi(x W + b)``.
A bilinear projection reshapes ``x`` row-major into a ``(d1, d2)`` matrix and
computes ``phi(w1 x w2 + b)`` with ``w1: (k1, d1)``, ``w2: (d2, k2)`` and a
``(k1, k2)`` bias. Flattening the bilinear output row-major gives exactly the
full projection with ``W = kron(w1.T, w2)``; :func:`expand_to_full` builds that
matrix and is the reference every bilinear code path is tested against.

All functions accept an optional leading batch axis on the input. Parameter
gradients are summed over it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from bpnet.errors import ParameterError, ShapeError
from bpnet.tensor import as_float, kronecker


def factorize_dim(n: int) -> tuple[int, int]:
    """Most balanced exact factorization ``(d1, d2)`` of ``n`` with ``d1 <= d2``."""
    if n < 1:
        raise ParameterError(f"cannot factorize {n}")
    d1 = math.isqrt(n)
    while n % d1:
        d1 -= 1
    return d1, n // d1


def is_degenerate(n: int) -> bool:
    return n > 3 and factorize_dim(n)[0] == 1


def warn_if_degenerate(n: int, what: str) -> None:
    if is_degenerate(n):
        warnings.warn(
            f"{what}={n} has no factorization other than (1, {n}); "
            "the bilinear map degenerates to a single full factor",
            stacklevel=3,
        )


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(z):
    z = as_float(z)
    if z.ndim == 0:
        return _sigmoid(z.reshape(1))[0]
    return _sigmoid(z)


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in _ACTIVATIONS:
            raise ParameterError(
                f"unknown activation {self.kind!r}; expected one of {sorted(_ACTIVATIONS)}"
            )

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return _ACTIVATIONS[self.kind][0](z)

    def grad(self, z: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Derivative with respect to the pre-activation ``z``.

        ``out`` may carry the already computed ``phi(z)`` to skip recomputation.
        """
        if out is None:
            out = self(z)
        return _ACTIVATIONS[self.kind][1](z, out)

    @property
    def has_kink(self) -> bool:
        return self.kind == "relu"


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda z: z, lambda z, out: np.ones_like(z)),
    "sigmoid": (sigmoid, lambda z, out: out * (1.0 - out)),
    "tanh": (np.tanh, lambda z, out: 1.0 - out * out),
    # subgradient at exactly 0 is 0
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, out: (z > 0).astype(z.dtype)),
}

IDENTITY = Activation("identity")


@dataclass
class FullProjection:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"inconsistent full projection: W {self.W.shape}, b {self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def num_params(self) -> int:
        return self.W.size + self.b.size


@dataclass
class BilinearProjection:
    w1: np.ndarray  # (k1, d1)
    w2: np.ndarray  # (d2, k2)
    b: np.ndarray  # (k1, k2)

    def __post_init__(self):
        k1, d1 = self.w1.shape
        d2, k2 = self.w2.shape
        if self.b.shape != (k1, k2):
            raise ShapeError(
                f"bias shape {self.b.shape} does not match output factors ({k1}, {k2})"
            )

    @property
    def in_factors(self) -> tuple[int, int]:
        return self.w1.shape[1], self.w2.shape[0]

    @property
    def out_factors(self) -> tuple[int, int]:
        return self.w1.shape[0], self.w2.shape[1]

    @property
    def in_dim(self) -> int:
        d1, d2 = self.in_factors
        return d1 * d2

    @property
    def out_dim(self) -> int:
        k1, k2 = self.out_factors
        return k1 * k2

    def num_params(self) -> int:
        return self.w1.size + self.w2.size + self.b.size


def full_forward(p: FullProjection, x: np.ndarray, phi: Activation = IDENTITY) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, projection expects {p.in_dim}")
    return phi(x @ p.W + p.b)


def _check_matrix_input(p: BilinearProjection, xm: np.ndarray) -> None:
    if xm.ndim < 2 or xm.shape[-2:] != p.in_factors:
        raise ShapeError(
            f"input matrix shape {xm.shape[-2:] if xm.ndim >= 2 else xm.shape} "
            f"does not match projection input factors {p.in_factors}"
        )


def bilinear_pre(p: BilinearProjection, xm: np.ndarray) -> np.ndarray:
    xm = np.asarray(xm)
    _check_matrix_input(p, xm)
    return p.w1 @ xm @ p.w2 + p.b


def bilinear_forward(
    p: BilinearProjection, xm: np.ndarray, phi: Activation = IDENTITY
) -> np.ndarray:
    return phi(bilinear_pre(p, xm))


def expand_to_full(p: BilinearProjection) -> FullProjection:
    """Equivalent full projection: ``W = kron(w1.T, w2)``, ``b = flatten(b)``."""
    return FullProjection(W=kronecker(p.w1.T, p.w2), b=p.b.reshape(-1).copy())


def bilinear_backward(
    p: BilinearProjection,
    xm: np.ndarray,
    phi: Activation,
    upstream: np.ndarray,
    pre: np.ndarray | None = None,
):
    """Gradients of a scalar loss through ``phi(w1 xm w2 + b)``.

    ``upstream`` is the loss gradient with respect to the layer output. Returns
    ``(gw1, gw2, gb, gx)``; parameter gradients are summed over any batch axes.
    Weight decay is not included.
    """
    xm = np.asarray(xm)
    upstream = np.asarray(upstream)
    _check_matrix_input(p, xm)
    if pre is None:
        pre = bilinear_pre(p, xm)
    if upstream.shape != pre.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {pre.shape}")
    g = upstream * phi.grad(pre)
    xw2 = xm @ p.w2
    w1x = p.w1 @ xm
    gw1 = g @ np.swapaxes(xw2, -1, -2)
    gw2 = np.swapaxes(w1x, -1, -2) @ g
    gb = g
    gx = p.w1.T @ g @ p.w2.T
    if g.ndim > 2:
        batch_axes = tuple(range(g.ndim - 2))
        gw1 = gw1.sum(axis=batch_axes)
        gw2 = gw2.sum(axis=batch_axes)
        gb = gb.sum(axis=batch_axes)
    return gw1, gw2, gb, gx


def full_backward(
    p: FullProjection,
    x: np.ndarray,
    phi: Activation,
    upstream: np.ndarray,
    pre: np.ndarray | None = None,
):
    """Returns ``(gW, gb, gx)`` for ``phi(x W + b)``; ``x`` is ``(D,)`` or ``(N, D)``."""
    x = np.asarray(x)
    if pre is None:
        pre = x @ p.W + p.b
    g = upstream * phi.grad(pre)
    x2 = x.reshape(-1, p.in_dim)
    g2 = g.reshape(-1, p.out_dim)
    return x2.T @ g2, g2.sum(axis=0), g @ p.W.T


def freedom_degree(kind: str, D: int, K: int) -> int:
    """Independent trainable scalars of a bias-free ``D -> K`` mapping."""
    if D < 1 or K < 1:
        raise ParameterError(f"dimensions must be positive, got D={D}, K={K}")
    if kind == "full":
        return D * K
    if kind == "bilinear":
        d1, d2 = factorize_dim(D)
        k1, k2 = factorize_dim(K)
        return k1 * d1 + d2 * k2
    if kind in ("circulant", "jl", "circulant_or_jl"):
        return D
    raise ParameterError(f"unknown mapping kind {kind!r}")
