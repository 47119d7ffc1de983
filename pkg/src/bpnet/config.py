"""Architecture/training config: a JSON document validated against a schema.

Top-level keys::

    seed, input_shape, loss, optimizer, batch_size, epochs,
    validation_split, shuffle_seed, augment, layers

``input_shape`` excludes the batch axis: ``[64]`` for vectors, ``[H, W, C]``
for images, ``[T]`` for token sequences. Each layer entry has a ``type`` and
type-specific keys; declared input sizes (``in_features``, ``in_channels``,
``input_dim``) are optional and checked against the inferred shapes.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from bpnet.errors import ConfigError

_POS = {"type": "integer", "minimum": 1}
_MODE = {
    "projection": {"enum": ["full", "bilinear"]},
    "alpha": _POS,
    "init_std": {"type": "number", "exclusiveMinimum": 0},
}
_ACT = {"enum": ["identity", "relu", "sigmoid", "tanh"]}


def _layer(type_name: str, required=(), **props) -> dict:
    return {
        "type": "object",
        "properties": {"type": {"const": type_name}, **props},
        "required": ["type", *required],
        "additionalProperties": False,
    }


LAYER_SCHEMAS = {
    "dense": _layer(
        "dense", ["units"], units=_POS, in_features=_POS, activation=_ACT, **_MODE
    ),
    "conv2d": _layer(
        "conv2d",
        ["filters"],
        filters=_POS,
        in_channels=_POS,
        kernel={
            "oneOf": [_POS, {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2}]
        },
        stride=_POS,
        padding={"enum": ["valid", "same"]},
        activation=_ACT,
        **_MODE,
    ),
    "embedding": _layer("embedding", ["vocab", "dim"], vocab=_POS, dim=_POS, **_MODE),
    "lstm": _layer(
        "lstm",
        ["units"],
        units=_POS,
        input_dim=_POS,
        return_sequences={"type": "boolean"},
        forget_bias={"type": "number"},
        **_MODE,
    ),
    **{
        name: _layer(name)
        for name in ("relu", "sigmoid", "tanh", "maxpool", "gap", "flatten", "softmax")
    },
}

SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "input_shape": {"type": "array", "items": _POS, "minItems": 1},
        "loss": {"enum": ["cross_entropy", "mse"]},
        "optimizer": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["sgd", "adam", "rmsprop"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "rho": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "lambda": {"type": "number", "minimum": 0},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "batch_size": _POS,
        "epochs": {"type": "integer", "minimum": 0},
        "validation_split": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "shuffle_seed": {"type": "integer", "minimum": 0},
        "augment": {
            "type": "object",
            "properties": {
                "flip": {"type": "boolean"},
                "crop": {"type": "integer", "minimum": 0},
                "rotate": {"type": "boolean"},
                "channel_swap": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "layers": {"type": "array", "items": {"type": "object"}},
    },
    "required": ["input_shape", "layers"],
    "additionalProperties": False,
}

DEFAULTS = {
    "seed": 0,
    "loss": "cross_entropy",
    "optimizer": {"kind": "adam"},
    "batch_size": 64,
    "epochs": 10,
    "validation_split": 0.1,
    "shuffle_seed": 1,
}


def _error(e: jsonschema.ValidationError, prefix: str = "") -> ConfigError:
    parts = [str(p) for p in e.absolute_path]
    message = e.message
    if e.validator == "additionalProperties" and isinstance(e.instance, dict):
        # name the first offending key in the path itself
        extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
        if extra:
            parts.append(extra[0])
            message = "unknown key"
    path = prefix + "".join(f"/{p}" for p in parts)
    return ConfigError(f"{path or '/'}: {message}")


def validate(cfg: dict) -> dict:
    """Checks ``cfg`` and returns a copy with defaults filled in."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        raise _error(e) from None
    for i, layer in enumerate(cfg["layers"]):
        kind = layer.get("type")
        if kind not in LAYER_SCHEMAS:
            raise ConfigError(f"/layers/{i}/type: unknown layer type {kind!r}")
        try:
            jsonschema.validate(layer, LAYER_SCHEMAS[kind])
        except jsonschema.ValidationError as e:
            raise _error(e, f"/layers/{i}") from None
    out = copy.deepcopy(DEFAULTS)
    out.update(copy.deepcopy(cfg))
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return validate(cfg)
