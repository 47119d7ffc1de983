"""Dense tensor helpers on top of numpy.

Tensors are plain ``numpy.ndarray`` objects (float64 unless asked otherwise).
This module adds the shape-checked primitives the layers rely on and the
pinned random generator used for all initialization.

Random numbers come from numpy's ``PCG64`` bit generator wrapped in
``numpy.random.Generator``. The normal sampler is numpy's ziggurat
implementation, whose output for a given seed is stable across platforms.
Switching generator invalidates golden values in the test suite.
"""

from __future__ import annotations

import numpy as np

from bpnet.errors import ParameterError, ShapeError

DTYPE = np.float64

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.asarray(x, dtype=dtype)


def as_float(x) -> np.ndarray:
    """Array view of ``x``; non-floating input becomes float64, float dtypes are kept."""
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(DTYPE)


def reshape_matrix(v: np.ndarray, d1: int, d2: int) -> np.ndarray:
    """Row-major reshape of a length ``d1*d2`` vector into a ``(d1, d2)`` matrix."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ShapeError(f"reshape_matrix expects a vector, got shape {v.shape}")
    if d1 < 1 or d2 < 1 or d1 * d2 != v.shape[0]:
        raise ShapeError(
            f"cannot reshape vector of length {v.shape[0]} into ({d1}, {d2}) "
            f"= {d1 * d2} elements"
        )
    return v.reshape(d1, d2)


def flatten(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"flatten expects a 2-D matrix, got shape {m.shape}")
    return m.reshape(-1).copy()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated strictly left to right over the inner axis.

    The result is bit-identical to a naive triple loop. Layers use numpy's
    BLAS-backed ``@`` instead; this is the reference product.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return a * b


def kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Block matrix whose ``(i, j)`` block is ``a[i, j] * b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kronecker expects 2-D operands, got {a.shape} and {b.shape}")
    return np.kron(a, b)


def normal_init(rng: Rng, shape, stddev: float = 0.1, dtype=DTYPE) -> np.ndarray:
    """Zero-mean normal samples. The default stddev gives variance 0.01."""
    if not stddev > 0:
        raise ParameterError(f"stddev must be positive, got {stddev}")
    return rng.normal(0.0, stddev, size=tuple(shape)).astype(dtype, copy=False)
