"""Bilinear (Kronecker-factored) projections for dense, conv, embedding and LSTM layers."""

from bpnet.errors import (
    BPNetError,
    BuildError,
    ConfigError,
    DataError,
    FormatError,
    MagicError,
    NumericError,
    ParameterError,
    ShapeError,
    TruncatedError,
    UsageError,
    VersionError,
)
from bpnet.projections import (
    Activation,
    BilinearProjection,
    FullProjection,
    bilinear_backward,
    bilinear_forward,
    expand_to_full,
    factorize_dim,
    freedom_degree,
    full_forward,
)
from bpnet.network import Model, build, load, save

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "BPNetError",
    "BilinearProjection",
    "BuildError",
    "ConfigError",
    "DataError",
    "FormatError",
    "FullProjection",
    "MagicError",
    "Model",
    "NumericError",
    "ParameterError",
    "ShapeError",
    "TruncatedError",
    "UsageError",
    "VersionError",
    "bilinear_backward",
    "bilinear_forward",
    "build",
    "expand_to_full",
    "factorize_dim",
    "freedom_degree",
    "full_forward",
    "load",
    "save",
]
