"""Datasets: synthetic generators, IDX and CIFAR-10 binary I/O, preprocessing, batching."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from bpnet.errors import DataError, FormatError, MagicError, ParameterError, TruncatedError
from bpnet.tensor import Rng, make_rng


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int | None = None
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} feature rows but {len(self.y)} labels")
        if self.num_classes is not None and len(self.y):
            if self.y.min() < 0 or self.y.max() >= self.num_classes:
                raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx], split=split or self.split)


def train_val_split(ds: Dataset, fraction: float, rng: Rng) -> tuple[Dataset, Dataset | None]:
    """Holds out ``round(fraction * N)`` randomly chosen samples (at least one if fraction > 0)."""
    if fraction <= 0:
        return ds, None
    n_val = max(1, int(round(fraction * len(ds))))
    if n_val >= len(ds):
        raise DataError(f"validation split {fraction} leaves no training samples")
    perm = rng.permutation(len(ds))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")


# --------------------------------------------------------------------------
# synthetic data


def synth_blobs(rng: Rng, classes: int, dim: int, per_class: int, spread: float) -> Dataset:
    """Gaussian clusters of ``per_class`` points around ``classes`` random centers.

    Centers are drawn from N(0, 1) in ``dim`` dimensions; points add
    N(0, spread**2) noise. Samples are ordered by class.
    """
    if classes < 1 or dim < 1 or per_class < 1:
        raise ParameterError("classes, dim and per_class must be >= 1")
    if spread < 0:
        raise ParameterError("spread must be >= 0")
    centers = rng.normal(0.0, 1.0, size=(classes, dim))
    noise = rng.normal(0.0, 1.0, size=(classes, per_class, dim))
    x = (centers[:, None, :] + spread * noise).reshape(-1, dim)
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(x, y, classes)


def synth_copy_sequences(rng: Rng, vocab: int, length: int, n: int) -> Dataset:
    """Uniform random token sequences whose label is the first token."""
    if vocab < 2 or length < 1 or n < 1:
        raise ParameterError("need vocab >= 2, length >= 1, n >= 1")
    x = rng.integers(0, vocab, size=(n, length))
    return Dataset(x, x[:, 0].copy(), vocab)


# --------------------------------------------------------------------------
# IDX

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Raw array from an IDX file (native byte order, no scaling)."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedError(f"{path}: header truncated at byte {len(buf)}", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise MagicError(f"{path}: bad IDX magic {buf[:4].hex()}")
    code, rank = buf[2], buf[3]
    if code not in IDX_DTYPES:
        raise FormatError(f"{path}: unsupported IDX dtype 0x{code:02x}")
    head = 4 + 4 * rank
    if len(buf) < head:
        raise TruncatedError(f"{path}: dimension table truncated at byte {len(buf)}", len(buf))
    dims = struct.unpack(f">{rank}I", buf[4:head])
    dt = IDX_DTYPES[code]
    need = head + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < need:
        raise TruncatedError(
            f"{path}: data truncated at byte {len(buf)}, expected {need} bytes", len(buf)
        )
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes after data")
    arr = np.frombuffer(buf, dtype=dt, offset=head).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    for code, dt in IDX_DTYPES.items():
        if dt.kind == arr.dtype.kind and dt.itemsize == arr.dtype.itemsize:
            break
    else:
        raise FormatError(f"no IDX dtype for {arr.dtype}")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(dt).tobytes())


def load_idx(path, images: bool = True) -> np.ndarray:
    """IDX array as float64. Unsigned-byte data is scaled to [0, 1].

    With ``images=True`` a rank-3 unsigned-byte array ``(N, H, W)`` gains a
    trailing channel axis of size 1.
    """
    raw = read_idx(path)
    if raw.dtype == np.uint8:
        out = raw.astype(np.float64) / 255.0
        if images and out.ndim == 3:
            out = out[..., None]
        return out
    return raw.astype(np.float64) if raw.dtype.kind == "f" else raw


_IDX_PAIRS = [
    ("features.idx", "labels.idx"),
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
]


def load_idx_dir(directory) -> Dataset:
    """Features/labels pair from a directory.

    Accepts ``features.idx`` + ``labels.idx`` or the MNIST training file names.
    Integer feature files (token sequences) are returned unscaled.
    """
    d = Path(directory)
    for feat, lab in _IDX_PAIRS:
        if (d / feat).exists() and (d / lab).exists():
            x = load_idx(d / feat)
            y = read_idx(d / lab).astype(np.int64)
            if y.ndim != 1:
                raise DataError(f"{d / lab}: labels must be rank 1, got shape {y.shape}")
            return Dataset(x, y, int(y.max()) + 1 if len(y) else None)
    raise DataError(f"{d}: no features.idx/labels.idx pair found")


def save_idx_dir(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_idx(d / "features.idx", ds.x)
    write_idx(d / "labels.idx", ds.y.astype(np.uint8) if ds.y.max() < 256 else ds.y.astype(np.int32))


# --------------------------------------------------------------------------
# CIFAR-10 binary batches

CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


def read_cifar10_batch(path, expected_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(uint8 images [N, 32, 32, 3], labels [N])`` from one batch file."""
    buf = Path(path).read_bytes()
    if len(buf) % CIFAR_RECORD:
        raise FormatError(
            f"{path}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    n = len(buf) // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise FormatError(f"{path}: {n} records, expected {expected_records}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if n and labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    images = rec[:, 1:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar10_batch(path, images: np.ndarray, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = len(labels)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.transpose(0, 3, 1, 2).reshape(n, -1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10_binary(directory, expected_records: int | None = None) -> dict[str, Dataset]:
    """Loads whichever of the standard batch files exist in ``directory``.

    Returns ``{"train": ..., "test": ...}`` (keys only for splits present),
    images ``[N, 32, 32, 3]`` scaled to [0, 1].
    """
    d = Path(directory)
    out = {}
    train = [d / f for f in CIFAR_TRAIN_FILES if (d / f).exists()]
    if train:
        parts = [read_cifar10_batch(p, expected_records) for p in train]
        x = np.concatenate([p[0] for p in parts]).astype(np.float64) / 255.0
        out["train"] = Dataset(x, np.concatenate([p[1] for p in parts]), 10, "train")
    if (d / CIFAR_TEST_FILE).exists():
        xi, yi = read_cifar10_batch(d / CIFAR_TEST_FILE, expected_records)
        out["test"] = Dataset(xi.astype(np.float64) / 255.0, yi, 10, "test")
    if not out:
        raise DataError(f"{d}: no CIFAR-10 batch files found")
    return out


# --------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        """Per-channel (last axis) statistics; zero-variance channels get std 1."""
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        flat = std == 0
        if np.any(flat):
            warnings.warn(f"{int(flat.sum())} channel(s) have zero variance; using std=1", stacklevel=2)
            std = np.where(flat, 1.0, std)
        return cls(mean, std)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def normalize(train: Dataset, *others: Dataset):
    """Fits per-channel stats on ``train`` and applies them to every dataset.

    Returns ``(normalizer, train_normalized, *others_normalized)``.
    """
    norm = Normalizer.fit(train.x)
    return (norm, replace(train, x=norm(train.x)), *(replace(d, x=norm(d.x)) for d in others))


def augment(
    batch: np.ndarray,
    rng: Rng,
    flip: bool = True,
    crop: int = 4,
    rotate: bool = False,
    channel_swap: bool = False,
) -> np.ndarray:
    """Random per-sample augmentation of an NHWC image batch.

    ``flip``: horizontal flip with probability 1/2. ``crop``: zero-pad by
    ``crop`` pixels and take a random crop of the original size. ``rotate``:
    random multiple of 90 degrees (square images only). ``channel_swap``:
    random permutation of the channels.
    """
    out = np.array(batch, copy=True)
    n, h, w, c = out.shape
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, ::-1, :]
    if crop:
        padded = np.pad(out, ((0, 0), (crop, crop), (crop, crop), (0, 0)))
        dy = rng.integers(0, 2 * crop + 1, size=n)
        dx = rng.integers(0, 2 * crop + 1, size=n)
        for k in range(n):
            out[k] = padded[k, dy[k] : dy[k] + h, dx[k] : dx[k] + w]
    if rotate:
        if h != w:
            raise ParameterError("rotation augmentation needs square images")
        turns = rng.integers(0, 4, size=n)
        for k in range(n):
            out[k] = np.rot90(out[k], turns[k], axes=(0, 1))
    if channel_swap:
        for k in range(n):
            out[k] = out[k][..., rng.permutation(c)]
    return out


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[:, :, ::-1, :].copy()


# --------------------------------------------------------------------------
# batching


def batch_indices(n: int, size: int, rng: Rng | None = None) -> Iterator[np.ndarray]:
    """Index arrays covering ``range(n)`` once; shuffled when ``rng`` is given."""
    if size < 1:
        raise ParameterError(f"batch size must be >= 1, got {size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def batches(ds: Dataset, size: int, seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    rng = make_rng(seed) if seed is not None else None
    for idx in batch_indices(len(ds), size, rng):
        yield ds.x[idx], ds.y[idx]


# --------------------------------------------------------------------------
# data specs used by the CLI


def _kv(spec: str) -> dict[str, str]:
    out = {}
    for part in filter(None, spec.split(",")):
        if "=" not in part:
            raise DataError(f"bad data option {part!r}; expected key=value")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def from_spec(spec: str) -> Dataset:
    """Parses ``synth:blobs:k=v,...``, ``synth:seq:k=v,...``, ``idx:DIR`` or ``cifar10:DIR``."""
    kind, _, rest = spec.partition(":")
    try:
        if kind == "synth":
            sub, _, opts = rest.partition(":")
            kv = _kv(opts)
            seed = int(kv.pop("seed", 0))
            if sub == "blobs":
                args = dict(
                    classes=int(kv.pop("classes", 4)),
                    dim=int(kv.pop("dim", 64)),
                    per_class=int(kv.pop("n", 250)),
                    spread=float(kv.pop("spread", BLOB_SPREAD)),
                )
                if kv:
                    raise DataError(f"unknown blobs options {sorted(kv)}")
                return synth_blobs(make_rng(seed), **args)
            if sub == "seq":
                args = dict(
                    vocab=int(kv.pop("vocab", 8)),
                    length=int(kv.pop("length", 5)),
                    n=int(kv.pop("n", 2000)),
                )
                if kv:
                    raise DataError(f"unknown seq options {sorted(kv)}")
                return synth_copy_sequences(make_rng(seed), **args)
            raise DataError(f"unknown synthetic dataset {sub!r}")
        if kind == "idx":
            return load_idx_dir(rest)
        if kind == "cifar10":
            return load_cifar10_binary(rest)["train"]
    except (ParameterError, FormatError, OSError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{spec}: {e}") from e
    raise DataError(f"unknown data spec {spec!r}")


# Noise level for the 4-class, 64-d blob benchmark. Chosen so the
# nearest-center rule classifies >= 99% of 1,000 seed-0 samples correctly
# while the classes still overlap somewhat (see tests/test_data.py).
BLOB_SPREAD = 2.0
