"""Datasets: small synthetic 2-D generators and IDX (MNIST) ingestion."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SYNTHETIC = ("ring8", "grid25", "two_moons")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    train_labels: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    discrete: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        widths = {a.shape[1] for a in (self.train, self.val, self.test)}
        if len(widths) != 1:
            raise ValueError(f"split widths differ: {sorted(widths)}")

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    @property
    def n_classes(self) -> int | None:
        if self.train_labels is None:
            return None
        return int(max(l.max() for l in (self.train_labels, self.val_labels, self.test_labels))) + 1

    @property
    def scale_correction(self) -> float:
        """NLL offset (nats) undoing the /256 rescaling of dequantized pixels."""
        return self.dim * math.log(256.0) if self.discrete else 0.0


def _split(x, labels, rng, fractions=(0.8, 0.1, 0.1)):
    n = len(x)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    idx = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    parts = [x[i] for i in idx]
    lab = [None, None, None] if labels is None else [labels[i] for i in idx]
    return parts, lab


def ring8_centers(radius: float = 2.0) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def grid25_centers() -> np.ndarray:
    ticks = np.arange(-2, 3) * 2.0
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _balanced_components(n: int, k: int, rng) -> np.ndarray:
    labels = np.arange(n) % k
    return rng.permutation(labels)


def make_synthetic(name: str, n: int, seed: int) -> Dataset:
    """Seeded 2-D toy data with an 80/10/10 split.

    Mixture components are assigned round-robin before shuffling, so every
    component holds n // k or n // k + 1 points.
    """
    if n < 10:
        raise ValueError("need at least 10 points")
    rng = np.random.default_rng(seed)
    if name == "ring8":
        centers = ring8_centers()
        labels = _balanced_components(n, 8, rng)
        x = centers[labels] + 0.1 * rng.standard_normal((n, 2))
    elif name == "grid25":
        centers = grid25_centers()
        labels = _balanced_components(n, 25, rng)
        x = centers[labels] + 0.1 * rng.standard_normal((n, 2))
    elif name == "two_moons":
        labels = _balanced_components(n, 2, rng)
        t = np.pi * rng.random(n)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower) + 0.1 * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown synthetic dataset {name!r}; choose from {SYNTHETIC}")
    (tr, va, te), (ltr, lva, lte) = _split(x, labels, rng)
    return Dataset(tr, va, te, ltr, lva, lte, discrete=False,
                   provenance={"generator": name, "n": n, "seed": seed})


def _read_exact(buf: bytes, offset: int, count: int, path) -> bytes:
    if offset + count > len(buf):
        raise FormatError(
            f"{path}: truncated at byte {len(buf)}, expected {offset + count} bytes"
        )
    return buf[offset:offset + count]


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes into an integer array."""
    buf = Path(path).read_bytes()
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, path))
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0 (expected uint8 IDX)")
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if ndim < 1:
        raise FormatError(f"{path}: zero-dimensional IDX payload")
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, path))
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    payload = _read_exact(buf, offset, count, path)
    if len(buf) != offset + count:
        raise FormatError(f"{path}: {len(buf) - offset - count} trailing bytes after byte {offset + count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).astype(np.int64)


def load_idx(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Images as an integer [n, rows, cols] array and optional labels [n]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC)
        if len(labels) != len(images):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
    return images, labels


def average_pool(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """Block-average [n, h, w] images; integer output stays in 0..255."""
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by {factor}")
    pooled = images.reshape(n, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return np.floor(pooled).astype(np.int64)


def dataset_from_idx(images_path, labels_path=None, seed: int = 0, pool14: bool = False,
                     test_images=None, test_labels=None) -> Dataset:
    """Flattened integer-pixel dataset; dequantization happens in training.

    With separate test files the training file is split 90/10 into
    train/val, otherwise 80/10/10.
    """
    from .training import dequantize_and_scale

    images, labels = load_idx(images_path, labels_path)
    if pool14:
        images = average_pool(images)
    x = images.reshape(len(images), -1)
    rng = np.random.default_rng(seed)
    if test_images is not None:
        t_img, t_lab = load_idx(test_images, test_labels)
        if pool14:
            t_img = average_pool(t_img)
        (tr, va, _), (ltr, lva, _) = _split(x, labels, rng, (0.9, 0.1, 0.0))
        te, lte = t_img.reshape(len(t_img), -1), t_lab
    else:
        (tr, va, te), (ltr, lva, lte) = _split(x, labels, rng)
    splits = [dequantize_and_scale(s, seed + i) for i, s in enumerate((tr, va, te))]
    return Dataset(*splits, ltr, lva, lte, discrete=True,
                   provenance={"images": str(images_path), "labels": str(labels_path), "seed": seed})
