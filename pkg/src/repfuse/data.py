"""CIFAR-10 binary reader, a synthetic stand-in, and batch augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import FormatError

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10000


@dataclass
class Dataset:
    """Images (N, 3, H, W) as raw uint8 or float, labels, and the normalization to apply."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    num_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        x = self.images[idx].astype(dtype)
        if self.mean is not None:
            x -= np.asarray(self.mean, dtype).reshape(1, -1, 1, 1)
            x /= np.asarray(self.std, dtype).reshape(1, -1, 1, 1)
        return x, self.labels[idx]

    def subset(self, fraction: float, seed: int = 0) -> "Dataset":
        if not 0 < fraction <= 1:
            raise ValueError(f"subset_fraction must be in (0, 1], got {fraction}")
        if fraction == 1:
            return self
        n = max(1, int(len(self) * fraction))
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx], self.split, self.mean, self.std, self.num_classes)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None, dtype=np.float32,
                drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for start in range(0, stop, batch_size):
            yield self.batch(order[start : start + batch_size], dtype)


def read_cifar_file(path, expected_records: Optional[int] = CIFAR_RECORDS_PER_FILE) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if expected_records is not None and raw.size != expected_records * RECORD_BYTES:
        raise FormatError(f"{path}: expected {expected_records * RECORD_BYTES} bytes, got {raw.size}")
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise FormatError(f"{path}: expected a positive multiple of {RECORD_BYTES} bytes, got {raw.size}")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def write_cifar_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), IMAGE_BYTES)
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], images], axis=1)
    rec.tofile(path)


def _resolve_dir(root) -> Path:
    root = Path(root or os.environ.get("REPFUSE_DATA_DIR", ""))
    if not str(root):
        raise FileNotFoundError("no dataset directory given and REPFUSE_DATA_DIR is unset")
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / TEST_FILE).exists():
            return cand
    raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def load_cifar10(root=None, records_per_file: Optional[int] = CIFAR_RECORDS_PER_FILE,
                 test_only: bool = False) -> tuple[Optional[Dataset], Dataset]:
    """Read the five training batches and the test batch.

    Both splits are normalized with per-channel statistics of the training
    split. With ``test_only`` the training files are skipped and the returned
    test split carries no normalization; the caller must supply it.
    """
    d = _resolve_dir(root)
    test_x, test_y = read_cifar_file(d / TEST_FILE, records_per_file)
    if test_only:
        return None, Dataset(test_x, test_y, "test")
    parts = [read_cifar_file(d / f, records_per_file) for f in TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    mean, std = channel_stats(train_x)
    return Dataset(train_x, train_y, "train", mean, std), Dataset(test_x, test_y, "test", mean, std)


def synthetic_dataset(n: int, classes: int = 10, seed: int = 0, image_size: int = 32, split: str = "train",
                      noise: float = 0.6) -> Dataset:
    """Gaussian blobs on noise; each class puts its blob at its own position.

    Blob centres sit on a circle around the image centre and jitter by up to
    one pixel per sample. Each class also gets its own hue, since a network
    ending in global average pooling barely sees position.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    s = image_size
    ang = 2 * np.pi * np.arange(classes) / classes
    radius = s * 0.3
    centers = np.stack([s / 2 + radius * np.sin(ang), s / 2 + radius * np.cos(ang)], axis=1)
    phase = ang[:, None] - np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    tint = 1.0 + np.cos(phase)
    yy, xx = np.mgrid[0:s, 0:s]
    sigma = s / 10
    imgs = rng.standard_normal((n, 3, s, s)) * noise
    jitter = rng.uniform(-1, 1, (n, 2))
    for k in range(n):
        cy, cx = centers[labels[k]] + jitter[k]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)) * 2.0
        imgs[k] += tint[labels[k]][:, None, None] * blob
    return Dataset(imgs.astype(np.float32), labels.astype(np.int64), split, None, None, classes)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.round(images * 40 + 128), 0, 255).astype(np.uint8)


def write_cifar_dir(root, train: Dataset, test: Dataset) -> Path:
    """Write datasets in the CIFAR-10 binary layout (train split over five files)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tx = train.images if train.images.dtype == np.uint8 else to_uint8(train.images)
    for f, idx in zip(TRAIN_FILES, np.array_split(np.arange(len(train)), 5)):
        write_cifar_file(root / f, tx[idx], train.labels[idx])
    ex = test.images if test.images.dtype == np.uint8 else to_uint8(test.images)
    write_cifar_file(root / TEST_FILE, ex, test.labels)
    return root


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4, offsets: Optional[np.ndarray] = None,
            flips: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the input size at a random offset, flip half.

    ``offsets`` (N, 2) in [0, 2*pad] and boolean ``flips`` (N,) override the
    random draws.
    """
    n, c, h, w = x.shape
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < 0.5
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for k in range(n):
        dy, dx = offsets[k]
        crop = xp[k, :, dy : dy + h, dx : dx + w]
        out[k] = crop[:, :, ::-1] if flips[k] else crop
    return out
