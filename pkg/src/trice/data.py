"""Dataset ingestion: MNIST IDX files and synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import math
import os
import struct

import numpy as np

from .errors import ConfigError, ParseError
from .nn import Dataset

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_MAX_ELEMENTS = 2**31  # refuse absurd headers before allocating

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX blob.

    Images (magic 0x803) come back as float64 ``(N, 1, rows, cols)`` in [0, 1];
    labels (magic 0x801) as int64 ``(N,)``. Errors carry the byte offset where
    decoding failed.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise ParseError("truncated header: missing magic", 0)
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise ParseError(f"unexpected magic 0x{magic:08x}", 0)
    ndim = 3 if magic == IMAGE_MAGIC else 1
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise ParseError(f"truncated header: need {ndim} dimension sizes", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = math.prod(dims)
    if count >= _MAX_ELEMENTS:
        raise ParseError(f"dimension overflow: {dims} describes {count} elements", 4)
    if len(buf) < end + count:
        raise ParseError(f"truncated payload: expected {count} bytes, got {len(buf) - end}",
                         len(buf))
    if len(buf) > end + count:
        raise ParseError(f"{len(buf) - end - count} trailing bytes after payload", end + count)
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=end)
    if magic == LABEL_MAGIC:
        return data.astype(np.int64)
    return data.reshape(dims[0], 1, dims[1], dims[2]).astype(np.float64) / 255.0


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 images ``(N, rows, cols)`` or labels ``(N,)``."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ConfigError("IDX encoding expects uint8 data")
    if a.ndim == 4 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim == 3:
        magic = IMAGE_MAGIC
    elif a.ndim == 1:
        magic = LABEL_MAGIC
    else:
        raise ConfigError(f"cannot encode array of shape {a.shape}")
    return struct.pack(f">I{a.ndim}I", magic, *a.shape) + np.ascontiguousarray(a).tobytes()


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    try:
        return parse_idx(raw)
    except ParseError as exc:
        err = ParseError(f"{path}: {exc.args[0]}")
        err.offset = exc.offset
        raise err from exc


def write_idx(path, array: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode_idx(array))


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise ConfigError(f"missing MNIST file {stem}[.gz] in {directory}")


def load_mnist(directory, split="train", limit: int | None = None) -> Dataset:
    """Load a split from the standard four-file MNIST layout in ``directory``."""
    if split not in MNIST_FILES:
        raise ConfigError(f"split must be one of {tuple(MNIST_FILES)}, got {split!r}")
    img_name, lbl_name = MNIST_FILES[split]
    images = read_idx(_find(directory, img_name))
    labels = read_idx(_find(directory, lbl_name))
    if images.ndim != 4 or labels.ndim != 1:
        raise ParseError(f"{directory}: image/label files swapped or malformed")
    if len(images) != len(labels):
        raise ParseError(f"{directory}: {len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels)


def generate_synthetic(classes: int, samples_per_class: int, seed: int, dim=16,
                       separation=10.0, sigma=1.0) -> Dataset:
    """Gaussian blobs, one per class, with pairwise mean distance ``separation * sigma``.

    Means sit on scaled coordinate axes, so ``classes <= dim`` is required.
    Samples are ordered by class.
    """
    if classes < 1 or samples_per_class < 1:
        raise ConfigError("classes and samples_per_class must be positive")
    if classes > dim:
        raise ConfigError(f"at most {dim} classes fit in {dim} dimensions")
    rng = np.random.default_rng(seed)
    means = np.eye(classes, dim) * separation * sigma / math.sqrt(2)
    labels = np.repeat(np.arange(classes), samples_per_class)
    inputs = means[labels] + sigma * rng.standard_normal((len(labels), dim))
    return Dataset(inputs, labels)


def train_val_split(dataset: Dataset, val_fraction=0.1, seed=0):
    """Shuffled (train, validation) split; the validation part has ``round(f * N)`` items."""
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must lie in [0, 1)")
    n_val = int(round(val_fraction * len(dataset)))
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def save_dataset(path, dataset: Dataset):
    with open(path, "wb") as fh:
        np.savez(fh, inputs=dataset.inputs, labels=dataset.labels)


def load_dataset(path) -> Dataset:
    try:
        with np.load(path) as z:
            return Dataset(z["inputs"], z["labels"])
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: not a saved dataset ({exc})") from exc
