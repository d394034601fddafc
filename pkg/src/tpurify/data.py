"""Dataset ingestion, augmentation, synthetic data and deterministic batching.

Supported on-disk formats:
  * MNIST IDX files (big-endian headers, magics 0x803 / 0x801), plain or
    gzip-compressed
  * CIFAR-10 binary batches (records of 1 label byte + 3072 pixel bytes,
    stored channel-major)

Pixels are always scaled to [0, 1] by dividing by 255; labels are int64.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import derive

MNIST_IMAGES_MAGIC = 0x00000803
MNIST_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD_BYTES = 1 + 3072
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


class DatasetFormatError(ValueError):
    """A dataset file failed structural validation."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int
    name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetFormatError(f"{self.name}: images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetFormatError(
                f"{self.name}: {self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.dtype != np.float32:
            self.images = self.images.astype(np.float32)
        if self.labels.dtype != np.int64:
            self.labels = self.labels.astype(np.int64)
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetFormatError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, n: int, seed: int | None = None) -> "Dataset":
        """First n examples, or a seeded subsample when a seed is given."""
        if n >= len(self):
            return self
        if seed is None:
            idx = np.arange(n)
        else:
            idx = derive(seed, "subset").permutation(len(self))[:n]
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.num_classes,
                       f"{self.name}[{n}]")


@dataclass
class AugmentSpec:
    pad_crop: int | None = None  # pad this many pixels each side, crop back
    hflip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.pad_crop is not None and self.pad_crop < 0:
            raise ValueError(f"pad_crop must be >= 0, got {self.pad_crop}")


def _open_maybe_gzip(path: str):
    with open(path, "rb") as probe:
        head = probe.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"{path}: truncated while reading {what} ({len(buf)} of {n} bytes)")
    return buf


def _check_magic(f, path: str, expected: int, what: str) -> None:
    (magic,) = struct.unpack(">I", _read_exact(f, 4, path, "magic"))
    if magic != expected:
        raise DatasetFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected:08x} for {what}")


def load_mnist_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an MNIST IDX image/label file pair into a dataset."""
    with _open_maybe_gzip(images_path) as f:
        _check_magic(f, images_path, MNIST_IMAGES_MAGIC, "images")
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, images_path, "image header"))
        raw = _read_exact(f, n * rows * cols, images_path, f"{n} images of {rows}x{cols}")
        if f.read(1):
            raise DatasetFormatError(f"{images_path}: trailing bytes after {n} images")
    with _open_maybe_gzip(labels_path) as f:
        _check_magic(f, labels_path, MNIST_LABELS_MAGIC, "labels")
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "label header"))
        raw_labels = _read_exact(f, n_labels, labels_path, f"{n_labels} labels")
    if n != n_labels:
        raise DatasetFormatError(f"count mismatch: {n} images vs {n_labels} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, num_classes=10, name="mnist")


def load_cifar10_bin(dir_path: str, split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches from a directory (split: train or test)."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    files = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    chunks_x, chunks_y = [], []
    for fname in files:
        path = os.path.join(dir_path, fname)
        if not os.path.exists(path):
            raise DatasetFormatError(f"missing CIFAR-10 batch file: {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR10_RECORD_BYTES:
            raise DatasetFormatError(
                f"{path}: size {raw.size} is not a multiple of the {CIFAR10_RECORD_BYTES}-byte record")
        recs = raw.reshape(-1, CIFAR10_RECORD_BYTES)
        chunks_y.append(recs[:, 0].astype(np.int64))
        chunks_x.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(chunks_x), np.concatenate(chunks_y), num_classes=10,
                   name=f"cifar10-{split}")


def augment(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-image random pad-and-crop (zero fill) then horizontal flip.

    Each image draws its own crop offset and flip coin, so a batch is
    augmented identically regardless of how it was sliced.
    """
    out = np.array(batch, dtype=np.float32, copy=True)
    B, C, H, W = out.shape
    p = spec.pad_crop
    if p:
        if p >= min(H, W):
            raise ValueError(f"pad_crop {p} must be smaller than image size {H}x{W}")
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, size=(B, 2))
        for i in range(B):
            oy, ox = offs[i]
            out[i] = padded[i, :, oy:oy + H, ox:ox + W]
    if spec.hflip:
        flips = rng.random(B) < 0.5
        out[flips] = out[flips, :, :, ::-1]
    return out


def make_synthetic_blobs(num_classes: int, n_per_class: int, dims: int,
                         separation: float, seed: int) -> Dataset:
    """Gaussian blobs at axis-aligned centers, affinely squashed into [0, 1].

    Centers sit at +/- separation along coordinate axes (so at most
    2 * dims classes); unit-variance noise is added, then all values are
    rescaled by one global affine map, which preserves linear separability.
    """
    if dims < 2:
        raise ValueError(f"dims must be >= 2, got {dims}")
    if separation <= 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    if num_classes > 2 * dims:
        raise ValueError(f"at most {2 * dims} classes fit {dims} dims, got {num_classes}")
    rng = derive(seed, "blobs")
    centers = np.zeros((num_classes, dims))
    for c in range(num_classes):
        axis, sign = c % dims, 1.0 if c < dims else -1.0
        centers[c, axis] = sign * separation
    labels = np.repeat(np.arange(num_classes), n_per_class)
    points = centers[labels] + rng.standard_normal((labels.size, dims))
    lo, hi = points.min(), points.max()
    points = (points - lo) / (hi - lo)
    images = points.reshape(-1, 1, 1, dims).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), num_classes, name="blobs")


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0):
    """Yield (images, labels) batches covering every index exactly once.

    With a seed, the order is the Philox permutation keyed by
    (shuffle_seed, epoch); without, natural order. The last batch may be
    short.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = derive(shuffle_seed, "shuffle", epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
