"""Layers with hand-written forward and backward passes.

Every layer takes a leading batch axis. Image tensors are NHWC. ``forward``
caches what ``backward`` needs; ``backward`` consumes the cache, fills
``self.grads`` (summed over the batch, no weight decay) and returns the
gradient with respect to the layer input.

Layers with a ``projection`` argument come in two modes. ``"full"`` uses an
ordinary weight matrix. ``"bilinear"`` replaces it with two factor matrices
and every such layer has an ``expand_to_full()`` returning the full-mode layer
that computes the same function.
"""

from __future__ import annotations

import math

import numpy as np

from bpnet.errors import NumericError, ParameterError, ShapeError, UsageError
from bpnet.projections import (
    Activation,
    BilinearProjection,
    bilinear_backward,
    factorize_dim,
    sigmoid,
    warn_if_degenerate,
)
from bpnet.tensor import DTYPE, Rng, as_float, kronecker, normal_init

PROJECTIONS = ("full", "bilinear")


def _check_mode(projection: str, alpha: int) -> None:
    if projection not in PROJECTIONS:
        raise ParameterError(f"projection must be 'full' or 'bilinear', got {projection!r}")
    if not isinstance(alpha, (int, np.integer)) or alpha < 1:
        raise ParameterError(f"alpha must be an integer >= 1, got {alpha!r}")
    if projection == "full" and alpha != 1:
        raise ParameterError("alpha only applies to bilinear projections")


class Layer:
    """Base class. Subclasses set ``type_name`` and implement the hooks."""

    type_name = ""
    weight_names: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def init_params(self, rng: Rng) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def config(self) -> dict:
        return {"type": self.type_name}

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def kink_inputs(self) -> list[np.ndarray]:
        """Pre-activations from the last forward that went through a relu."""
        return []

    def _pop_cache(self):
        if self._cache is None:
            raise UsageError(f"{self.type_name}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items() if k != "type")
        return f"{type(self).__name__}({args})"


# --------------------------------------------------------------------------
# parameter-free layers


class ActivationLayer(Layer):
    def __init__(self, kind: str):
        super().__init__()
        self.activation = Activation(kind)
        self.type_name = kind

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        out = self.activation(x)
        self._cache = (x, out)
        return out

    def backward(self, dout):
        x, out = self._pop_cache()
        return dout * self.activation.grad(x, out)

    def kink_inputs(self):
        if self.activation.has_kink and self._cache is not None:
            return [self._cache[0]]
        return []


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = as_float(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    type_name = "softmax"

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        out = softmax(x)
        self._cache = out
        return out

    def backward(self, dout):
        s = self._pop_cache()
        return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


class Flatten(Layer):
    type_name = "flatten"

    def output_shape(self, input_shape):
        return (math.prod(input_shape),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._pop_cache())


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2 on NHWC input; odd trailing rows/columns are dropped.

    Gradient goes to the first maximum in row-major window order.
    """

    type_name = "maxpool"

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"maxpool expects (H, W, C) input, got {input_shape}")
        h, w, c = input_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool needs at least 2x2 spatial input, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        win = (
            x[:, : 2 * ho, : 2 * wo, :]
            .reshape(n, ho, 2, wo, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, 4)
        )
        idx = win.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, idx = self._pop_cache()
        n, h, w, c = shape
        ho, wo = h // 2, w // 2
        win = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
        np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(shape, dtype=dout.dtype)
        dx[:, : 2 * ho, : 2 * wo, :] = (
            win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        )
        return dx


class GlobalAvgPool(Layer):
    type_name = "gap"

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"gap expects (H, W, C) input, got {input_shape}")
        return (input_shape[2],)

    def forward(self, x):
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        n, h, w, c = self._pop_cache()
        return np.broadcast_to(dout[:, None, None, :] / (h * w), (n, h, w, c)).copy()


# --------------------------------------------------------------------------
# dense


class Dense(Layer):
    """Affine layer ``phi(x W + b)`` or its bilinear replacement.

    In bilinear mode the input is reshaped to ``(d1, d2) = factorize_dim(D)``
    and the base output ``K`` to ``(k1, k2)``. Only the second factor is
    widened by ``alpha``: ``w1: (k1, d1)``, ``w2: (d2, alpha*k2)``, so the
    layer emits ``alpha*K`` features and holds
    ``k1*d1 + d2*alpha*k2 + alpha*K`` parameters.
    """

    type_name = "dense"

    def __init__(
        self,
        in_features: int,
        units: int,
        projection: str = "full",
        alpha: int = 1,
        activation: str = "identity",
        init_std: float = 0.1,
    ):
        super().__init__()
        _check_mode(projection, alpha)
        if in_features < 1 or units < 1:
            raise ParameterError(f"dense dims must be positive, got {in_features}->{units}")
        self.in_features = in_features
        self.units = units
        self.projection = projection
        self.alpha = alpha
        self.activation = Activation(activation)
        self.init_std = init_std
        if projection == "bilinear":
            warn_if_degenerate(in_features, "dense input dim")
            warn_if_degenerate(units, "dense output dim")
            self.in_factors = factorize_dim(in_features)
            k1, k2 = factorize_dim(units)
            self.out_factors = (k1, alpha * k2)
            self.weight_names = ("w1", "w2")
            d1, d2 = self.in_factors
            shapes = {"w1": (k1, d1), "w2": (d2, alpha * k2), "b": self.out_factors}
        else:
            self.weight_names = ("W",)
            shapes = {"W": (in_features, units), "b": (units,)}
        self.params = {k: np.zeros(s, dtype=DTYPE) for k, s in shapes.items()}

    @property
    def out_features(self) -> int:
        return self.alpha * self.units

    def init_params(self, rng):
        for name in self.weight_names:
            self.params[name] = normal_init(rng, self.params[name].shape, self.init_std)
        self.params["b"] = np.zeros_like(self.params["b"])

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(
                f"dense expects input shape ({self.in_features},), got {tuple(input_shape)}"
            )
        return (self.out_features,)

    def bilinear(self) -> BilinearProjection:
        return BilinearProjection(self.params["w1"], self.params["w2"], self.params["b"])

    def _check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expects input (N, {self.in_features}), got {x.shape}"
            )

    def forward(self, x):
        self._check_input(x)
        n = x.shape[0]
        if self.projection == "full":
            pre = x @ self.params["W"] + self.params["b"]
        else:
            xm = x.reshape(n, *self.in_factors)
            pre = (self.params["w1"] @ xm @ self.params["w2"] + self.params["b"]).reshape(n, -1)
        out = self.activation(pre)
        self._cache = (x, pre, out)
        return out

    def backward(self, dout):
        x, pre, out = self._pop_cache()
        n = x.shape[0]
        if self.projection == "full":
            g = dout * self.activation.grad(pre, out)
            self.grads = {"W": x.T @ g, "b": g.sum(axis=0)}
            return g @ self.params["W"].T
        k1, k2 = self.out_factors
        gw1, gw2, gb, gx = bilinear_backward(
            self.bilinear(),
            x.reshape(n, *self.in_factors),
            self.activation,
            dout.reshape(n, k1, k2),
            pre=pre.reshape(n, k1, k2),
        )
        self.grads = {"w1": gw1, "w2": gw2, "b": gb}
        return gx.reshape(n, -1)

    def kink_inputs(self):
        if self.activation.has_kink and self._cache is not None:
            return [self._cache[1]]
        return []

    def expand_to_full(self) -> "Dense":
        if self.projection != "bilinear":
            raise UsageError("layer is already a full projection")
        full = Dense(self.in_features, self.out_features, "full", 1, self.activation.kind)
        full.params["W"] = kronecker(self.params["w1"].T, self.params["w2"])
        full.params["b"] = self.params["b"].reshape(-1).copy()
        return full

    def config(self):
        cfg = {
            "type": "dense",
            "in_features": self.in_features,
            "units": self.units,
            "projection": self.projection,
            "alpha": self.alpha,
            "activation": self.activation.kind,
        }
        if self.init_std != 0.1:
            cfg["init_std"] = self.init_std
        return cfg


# --------------------------------------------------------------------------
# convolution


def conv_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Returns ``(out_size, pad_before, pad_after)`` along one spatial axis."""
    if padding == "valid":
        if size < k:
            raise ShapeError(f"kernel extent {k} exceeds input extent {size}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ParameterError(f"padding must be 'valid' or 'same', got {padding!r}")


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int = 1, padding: str = "valid"):
    """Extracts patches from NHWC ``x``.

    Returns ``(cols, (ho, wo))`` where ``cols`` has shape ``(N*ho*wo, kh*kw, C)``;
    patches are ordered by sample, then output row, then output column, and
    the rows of each patch follow row-major order within the kernel window.
    """
    n, h, w, c = x.shape
    kh, kw = kernel
    ho, pt, pb = conv_geometry(h, kh, stride, padding)
    wo, pl, pr = conv_geometry(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[
                :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :
            ]
    return cols.reshape(n * ho * wo, kh * kw, c), (ho, wo)


def col2im(cols: np.ndarray, x_shape, kernel, stride: int = 1, padding: str = "valid") -> np.ndarray:
    """Adjoint of :func:`im2col`: scatters patch values back, summing overlaps."""
    n, h, w, c = x_shape
    kh, kw = kernel
    ho, pt, pb = conv_geometry(h, kh, stride, padding)
    wo, pl, pr = conv_geometry(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    xp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += (
                cols[:, :, :, i, j, :]
            )
    return xp[:, pt : pt + h, pl : pl + w, :]


class Conv2D(Layer):
    """2-D convolution over NHWC input.

    Each receptive field is a ``(kh*kw, c)`` matrix: spatial positions as rows,
    channels as columns. Full mode flattens it and applies a
    ``(kh*kw*c, filters)`` weight. Bilinear mode computes ``w1 P w2 + b`` with
    ``w1: (alpha*k1, kh*kw)`` and ``w2: (c, alpha*k2)`` where
    ``(k1, k2) = factorize_dim(filters)``; both factors are widened, so the
    layer emits ``alpha**2 * filters`` channels.
    """

    type_name = "conv2d"

    def __init__(
        self,
        in_channels: int,
        filters: int,
        kernel=(3, 3),
        stride: int = 1,
        padding: str = "valid",
        projection: str = "full",
        alpha: int = 1,
        activation: str = "identity",
        init_std: float = 0.1,
    ):
        super().__init__()
        _check_mode(projection, alpha)
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        if len(kernel) != 2 or min(kernel) < 1 or stride < 1:
            raise ParameterError(f"bad kernel {kernel} or stride {stride}")
        if padding not in ("valid", "same"):
            raise ParameterError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.projection = projection
        self.alpha = alpha
        self.activation = Activation(activation)
        self.init_std = init_std
        s = kernel[0] * kernel[1]
        if projection == "bilinear":
            warn_if_degenerate(filters, "conv filters")
            k1, k2 = factorize_dim(filters)
            self.out_factors = (alpha * k1, alpha * k2)
            self.weight_names = ("w1", "w2")
            shapes = {"w1": (alpha * k1, s), "w2": (in_channels, alpha * k2), "b": self.out_factors}
        else:
            self.weight_names = ("W",)
            shapes = {"W": (s * in_channels, filters), "b": (filters,)}
        self.params = {k: np.zeros(sh, dtype=DTYPE) for k, sh in shapes.items()}

    @property
    def out_channels(self) -> int:
        return self.alpha**2 * self.filters

    def init_params(self, rng):
        for name in self.weight_names:
            self.params[name] = normal_init(rng, self.params[name].shape, self.init_std)
        self.params["b"] = np.zeros_like(self.params["b"])

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d expects (H, W, C) input, got {tuple(input_shape)}")
        h, w, c = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} input channels, got {c}")
        ho = conv_geometry(h, self.kernel[0], self.stride, self.padding)[0]
        wo = conv_geometry(w, self.kernel[1], self.stride, self.padding)[0]
        return (ho, wo, self.out_channels)

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"conv2d expects (N, H, W, {self.in_channels}) input, got {x.shape}")
        n = x.shape[0]
        cols, (ho, wo) = im2col(x, self.kernel, self.stride, self.padding)
        if self.projection == "full":
            pre = cols.reshape(cols.shape[0], -1) @ self.params["W"] + self.params["b"]
        else:
            pre = (self.params["w1"] @ cols @ self.params["w2"] + self.params["b"]).reshape(
                cols.shape[0], -1
            )
        pre = pre.reshape(n, ho, wo, -1)
        out = self.activation(pre)
        self._cache = (x.shape, cols, pre, out)
        return out

    def backward(self, dout):
        x_shape, cols, pre, out = self._pop_cache()
        g = (dout * self.activation.grad(pre, out)).reshape(cols.shape[0], -1)
        if self.projection == "full":
            flat = cols.reshape(cols.shape[0], -1)
            self.grads = {"W": flat.T @ g, "b": g.sum(axis=0)}
            dcols = (g @ self.params["W"].T).reshape(cols.shape)
        else:
            gw1, gw2, gb, dcols = bilinear_backward(
                self.bilinear(),
                cols,
                Activation("identity"),
                g.reshape(cols.shape[0], *self.out_factors),
            )
            self.grads = {"w1": gw1, "w2": gw2, "b": gb}
        return col2im(dcols, x_shape, self.kernel, self.stride, self.padding)

    def bilinear(self) -> BilinearProjection:
        return BilinearProjection(self.params["w1"], self.params["w2"], self.params["b"])

    def kink_inputs(self):
        if self.activation.has_kink and self._cache is not None:
            return [self._cache[2]]
        return []

    def expand_to_full(self) -> "Conv2D":
        if self.projection != "bilinear":
            raise UsageError("layer is already a full projection")
        full = Conv2D(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
            self.padding,
            "full",
            1,
            self.activation.kind,
        )
        full.params["W"] = kronecker(self.params["w1"].T, self.params["w2"])
        full.params["b"] = self.params["b"].reshape(-1).copy()
        return full

    def config(self):
        cfg = {
            "type": "conv2d",
            "in_channels": self.in_channels,
            "filters": self.filters,
            "kernel": list(self.kernel),
            "stride": self.stride,
            "padding": self.padding,
            "projection": self.projection,
            "alpha": self.alpha,
            "activation": self.activation.kind,
        }
        if self.init_std != 0.1:
            cfg["init_std"] = self.init_std
        return cfg


# --------------------------------------------------------------------------
# embedding


class Embedding(Layer):
    """Token lookup. Integer ids of shape ``(N,)`` or ``(N, T)``.

    Bilinear mode stores ``w1: (e1, v1)`` and ``w2: (v2, e2)`` with
    ``(v1, v2) = factorize_dim(vocab)`` and ``(e1, e2) = factorize_dim(alpha*dim)``.
    Token ``i = i1*v2 + i2`` maps to ``outer(w1[:, i1], w2[i2]).ravel()``,
    which is row ``i`` of ``kron(w1.T, w2)``; the full table is never built.
    """

    type_name = "embedding"

    def __init__(
        self,
        vocab: int,
        dim: int,
        projection: str = "full",
        alpha: int = 1,
        init_std: float = 0.1,
    ):
        super().__init__()
        _check_mode(projection, alpha)
        if vocab < 1 or dim < 1:
            raise ParameterError(f"embedding sizes must be positive, got vocab={vocab}, dim={dim}")
        self.vocab = vocab
        self.dim = dim
        self.projection = projection
        self.alpha = alpha
        self.init_std = init_std
        if projection == "bilinear":
            warn_if_degenerate(vocab, "vocabulary size")
            self.vocab_factors = factorize_dim(vocab)
            self.dim_factors = factorize_dim(alpha * dim)
            v1, v2 = self.vocab_factors
            e1, e2 = self.dim_factors
            self.weight_names = ("w1", "w2")
            shapes = {"w1": (e1, v1), "w2": (v2, e2)}
        else:
            self.weight_names = ("table",)
            shapes = {"table": (vocab, dim)}
        self.params = {k: np.zeros(s, dtype=DTYPE) for k, s in shapes.items()}

    @property
    def out_features(self) -> int:
        return self.alpha * self.dim

    def init_params(self, rng):
        for name in self.weight_names:
            self.params[name] = normal_init(rng, self.params[name].shape, self.init_std)

    def output_shape(self, input_shape):
        return tuple(input_shape) + (self.out_features,)

    def _check_ids(self, ids):
        if not np.issubdtype(ids.dtype, np.integer):
            if not np.all(np.mod(ids, 1) == 0):
                raise ShapeError("embedding expects integer token ids")
            ids = ids.astype(np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            bad = ids[(ids < 0) | (ids >= self.vocab)].flat[0]
            raise IndexError(f"token id {bad} out of range [0, {self.vocab})")
        return ids

    def forward(self, ids):
        ids = self._check_ids(np.asarray(ids))
        if self.projection == "full":
            out = self.params["table"][ids]
        else:
            v2 = self.vocab_factors[1]
            i1, i2 = np.divmod(ids, v2)
            a = self.params["w1"].T[i1]  # (..., e1)
            c = self.params["w2"][i2]  # (..., e2)
            out = (a[..., :, None] * c[..., None, :]).reshape(*ids.shape, -1)
        self._cache = ids
        return out

    def backward(self, dout):
        ids = self._pop_cache()
        if self.projection == "full":
            gt = np.zeros_like(self.params["table"])
            np.add.at(gt, ids.reshape(-1), dout.reshape(-1, self.dim))
            self.grads = {"table": gt}
            return None
        v2 = self.vocab_factors[1]
        e1, e2 = self.dim_factors
        i1, i2 = np.divmod(ids.reshape(-1), v2)
        g = dout.reshape(-1, e1, e2)
        a = self.params["w1"].T[i1]
        c = self.params["w2"][i2]
        gw1t = np.zeros_like(self.params["w1"].T)
        gw2 = np.zeros_like(self.params["w2"])
        np.add.at(gw1t, i1, np.einsum("nab,nb->na", g, c))
        np.add.at(gw2, i2, np.einsum("nab,na->nb", g, a))
        self.grads = {"w1": np.ascontiguousarray(gw1t.T), "w2": gw2}
        return None

    def expand_to_full(self) -> "Embedding":
        if self.projection != "bilinear":
            raise UsageError("layer is already a full projection")
        full = Embedding(self.vocab, self.out_features, "full")
        full.params["table"] = kronecker(self.params["w1"].T, self.params["w2"])
        return full

    def config(self):
        cfg = {
            "type": "embedding",
            "vocab": self.vocab,
            "dim": self.dim,
            "projection": self.projection,
            "alpha": self.alpha,
        }
        if self.init_std != 0.1:
            cfg["init_std"] = self.init_std
        return cfg


# --------------------------------------------------------------------------
# LSTM

GATES = ("i", "f", "o", "g")


class LSTM(Layer):
    """LSTM over ``(N, T, D)`` input with zero initial state.

    Full mode holds ``W_<gate>x: (D, H)``, ``W_<gate>h: (H, H)`` and ``b_<gate>: (H,)``
    per gate. Bilinear mode treats the hidden state as an ``(h1, alpha*h2)``
    matrix, ``(h1, h2) = factorize_dim(H)``, and replaces every map by a factor
    pair: ``w1_<gate>x: (h1, d1)``, ``w2_<gate>x: (d2, alpha*h2)``,
    ``w1_<gate>h: (h1, h1)``, ``w2_<gate>h: (alpha*h2, alpha*h2)`` plus a bias
    matrix ``b_<gate>: (h1, alpha*h2)``. States are carried flattened row-major.

    Returns the last hidden state, or all of them with ``return_sequences``.
    """

    type_name = "lstm"

    def __init__(
        self,
        input_dim: int,
        units: int,
        projection: str = "full",
        alpha: int = 1,
        return_sequences: bool = False,
        init_std: float = 0.1,
        forget_bias: float = 1.0,
    ):
        super().__init__()
        _check_mode(projection, alpha)
        if input_dim < 1 or units < 1:
            raise ParameterError(f"lstm sizes must be positive, got {input_dim}, {units}")
        self.input_dim = input_dim
        self.units = units
        self.projection = projection
        self.alpha = alpha
        self.return_sequences = return_sequences
        self.init_std = init_std
        self.forget_bias = forget_bias
        shapes = {}
        if projection == "bilinear":
            warn_if_degenerate(input_dim, "lstm input dim")
            warn_if_degenerate(units, "lstm units")
            d1, d2 = self.in_factors = factorize_dim(input_dim)
            h1, h2 = factorize_dim(units)
            self.hidden_factors = (h1, alpha * h2)
            hh = alpha * h2
            for gate in GATES:
                shapes[f"w1_{gate}x"] = (h1, d1)
                shapes[f"w2_{gate}x"] = (d2, hh)
                shapes[f"w1_{gate}h"] = (h1, h1)
                shapes[f"w2_{gate}h"] = (hh, hh)
                shapes[f"b_{gate}"] = (h1, hh)
        else:
            for gate in GATES:
                shapes[f"W_{gate}x"] = (input_dim, units)
                shapes[f"W_{gate}h"] = (units, units)
                shapes[f"b_{gate}"] = (units,)
        self.weight_names = tuple(k for k in shapes if not k.startswith("b_"))
        self.params = {k: np.zeros(s, dtype=DTYPE) for k, s in shapes.items()}

    @property
    def hidden_size(self) -> int:
        return self.alpha * self.units

    def init_params(self, rng):
        for name in self.weight_names:
            self.params[name] = normal_init(rng, self.params[name].shape, self.init_std)
        for gate in GATES:
            b = np.zeros_like(self.params[f"b_{gate}"])
            if gate == "f":
                b += self.forget_bias
            self.params[f"b_{gate}"] = b

    def output_shape(self, input_shape):
        if len(input_shape) != 2 or input_shape[1] != self.input_dim:
            raise ShapeError(
                f"lstm expects (T, {self.input_dim}) input, got {tuple(input_shape)}"
            )
        if self.return_sequences:
            return (input_shape[0], self.hidden_size)
        return (self.hidden_size,)

    # one map x -> z for a gate, on flat row vectors (N, in) -> (N, out)
    def _map(self, gate: str, src: str, v: np.ndarray) -> np.ndarray:
        if self.projection == "full":
            return v @ self.params[f"W_{gate}{src}"]
        shape = self.in_factors if src == "x" else self.hidden_factors
        m = v.reshape(v.shape[0], *shape)
        out = self.params[f"w1_{gate}{src}"] @ m @ self.params[f"w2_{gate}{src}"]
        return out.reshape(v.shape[0], -1)

    def _map_backward(self, gate, src, v, dz, grads) -> np.ndarray:
        n = v.shape[0]
        if self.projection == "full":
            grads[f"W_{gate}{src}"] += v.T @ dz
            return dz @ self.params[f"W_{gate}{src}"].T
        shape = self.in_factors if src == "x" else self.hidden_factors
        m = v.reshape(n, *shape)
        g = dz.reshape(n, *self.hidden_factors)
        w1 = self.params[f"w1_{gate}{src}"]
        w2 = self.params[f"w2_{gate}{src}"]
        grads[f"w1_{gate}{src}"] += np.einsum("nab,ncb->ac", g, m @ w2)
        grads[f"w2_{gate}{src}"] += np.einsum("nac,nab->cb", w1 @ m, g)
        return (w1.T @ g @ w2.T).reshape(n, -1)

    def _bias(self, gate):
        return self.params[f"b_{gate}"].reshape(-1)

    def step(self, x_t, h_prev, c_prev):
        """One time step on flat states. Returns ``(h_t, c_t, gates)``."""
        z = {g: self._map(g, "x", x_t) + self._map(g, "h", h_prev) + self._bias(g) for g in GATES}
        i = sigmoid(z["i"])
        f = sigmoid(z["f"])
        o = sigmoid(z["o"])
        g = np.tanh(z["g"])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return h, c, (i, f, o, g, tc)

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ShapeError(f"lstm expects (N, T, {self.input_dim}) input, got {x.shape}")
        n, t_len, _ = x.shape
        hsz = self.hidden_size
        h = np.zeros((n, hsz), dtype=x.dtype)
        c = np.zeros((n, hsz), dtype=x.dtype)
        steps = []
        hs = np.empty((n, t_len, hsz), dtype=x.dtype)
        for t in range(t_len):
            h_prev, c_prev = h, c
            h, c, gates = self.step(x[:, t], h_prev, c_prev)
            if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
                raise NumericError(f"lstm state became non-finite at step {t}")
            steps.append((x[:, t], h_prev, c_prev, gates))
            hs[:, t] = h
        self._cache = (x.shape, steps)
        return hs if self.return_sequences else h

    def backward(self, dout):
        x_shape, steps = self._pop_cache()
        n, t_len, _ = x_shape
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dh_next = np.zeros((n, self.hidden_size), dtype=dout.dtype)
        dc_next = np.zeros_like(dh_next)
        for t in reversed(range(t_len)):
            x_t, h_prev, c_prev, (i, f, o, g, tc) = steps[t]
            if self.return_sequences:
                dh = dout[:, t] + dh_next
            else:
                dh = dh_next + (dout if t == t_len - 1 else 0.0)
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = {
                "i": dc * g * i * (1.0 - i),
                "f": dc * c_prev * f * (1.0 - f),
                "o": dh * tc * o * (1.0 - o),
                "g": dc * i * (1.0 - g * g),
            }
            dc_next = dc * f
            dh_next = np.zeros_like(dh)
            for gate in GATES:
                grads[f"b_{gate}"] += dz[gate].sum(axis=0).reshape(grads[f"b_{gate}"].shape)
                dx[:, t] += self._map_backward(gate, "x", x_t, dz[gate], grads)
                dh_next += self._map_backward(gate, "h", h_prev, dz[gate], grads)
        self.grads = grads
        return dx

    def expand_to_full(self) -> "LSTM":
        if self.projection != "bilinear":
            raise UsageError("layer is already a full projection")
        full = LSTM(
            self.input_dim,
            self.hidden_size,
            "full",
            1,
            self.return_sequences,
            forget_bias=self.forget_bias,
        )
        for gate in GATES:
            for src in ("x", "h"):
                full.params[f"W_{gate}{src}"] = kronecker(
                    self.params[f"w1_{gate}{src}"].T, self.params[f"w2_{gate}{src}"]
                )
            full.params[f"b_{gate}"] = self.params[f"b_{gate}"].reshape(-1).copy()
        return full

    def config(self):
        cfg = {
            "type": "lstm",
            "input_dim": self.input_dim,
            "units": self.units,
            "projection": self.projection,
            "alpha": self.alpha,
            "return_sequences": self.return_sequences,
        }
        if self.init_std != 0.1:
            cfg["init_std"] = self.init_std
        if self.forget_bias != 1.0:
            cfg["forget_bias"] = self.forget_bias
        return cfg
