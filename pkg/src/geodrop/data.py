"""Datasets: MNIST IDX files and synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer class labels in ``0 .. n_classes-1``."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"features {x.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain NaN or inf")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.n_classes)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def _open(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int, limit=None) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        header = fh.read(4)
        if len(header) < 4:
            raise FormatError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic != expected_magic:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        n = dims[0] if limit is None else min(dims[0], int(limit))
        item = int(np.prod(dims[1:], dtype=np.int64))
        raw = fh.read(n * item)
    if len(raw) != n * item:
        raise FormatError(f"{path}: expected {n * item} data bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape((n,) + tuple(dims[1:]))


def load_mnist(images_path, labels_path, limit=None) -> Dataset:
    """Read an MNIST image/label IDX pair (optionally gzip-compressed).

    Pixels are scaled to [0, 1] and flattened; ``limit`` keeps the first
    examples in file order.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, limit)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, limit)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), n_classes=10)


def write_idx(path, array, compress=None) -> None:
    """Write a uint8 array as an IDX file (gzip if ``compress`` or path ends in .gz)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        # mtime=0 keeps the archive bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def simplex_vertices(n_classes: int, dim: int) -> np.ndarray:
    """Unit-norm vertices of a regular simplex with ``n_classes`` corners in ``dim`` dims."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if dim < n_classes - 1:
        raise ValueError(f"{n_classes} simplex vertices need dim >= {n_classes - 1}")
    centred = np.eye(n_classes) - 1.0 / n_classes
    # orthonormal basis of the sum-zero subspace
    u, _, _ = np.linalg.svd(centred)
    coords = centred @ u[:, : n_classes - 1]
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    out = np.zeros((n_classes, dim))
    out[:, : n_classes - 1] = coords
    return out


def synth_blobs(classes: int, per_class: int, dim: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian clusters centred at ``separation`` times simplex vertices.

    Examples are interleaved by class (0, 1, ..., K-1, 0, 1, ...) so that any
    prefix is roughly balanced.
    """
    rng = make_rng(seed)
    centres = separation * simplex_vertices(classes, dim)
    labels = np.tile(np.arange(classes), per_class)
    x = centres[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(x, labels, n_classes=classes)
