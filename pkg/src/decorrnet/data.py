"""Datasets: the CIFAR-10 binary format and synthetic correlated Gaussians."""

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
DATA_DIR_ENV = "DECORR_DATA_DIR"


class CifarFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (C, H, W, n)
    labels: np.ndarray  # (n,)
    split: str
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, np.float32))

    def __post_init__(self):
        if self.images.shape[-1] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[-1]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    cov: np.ndarray
    seed: int = 0

    @property
    def d(self) -> int:
        return self.cov.shape[0]


def default_data_dir() -> Path | None:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into uint8 images ``(n, 3, 32, 32)`` and labels."""
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        full = raw.size // RECORD_BYTES
        raise CifarFormatError(
            f"{path}: truncated record at byte offset {full * RECORD_BYTES} "
            f"(file has {raw.size} bytes, records are {RECORD_BYTES} bytes)"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise CifarFormatError(
            f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * RECORD_BYTES}"
        )
    return records[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``(n, 3, 32, 32)`` and labels in the binary batch layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None], images], axis=1)
    records.tofile(path)


def _resolve(directory: Path) -> Path:
    if (directory / TRAIN_FILES[0]).exists():
        return directory
    nested = directory / "cifar-10-batches-bin"
    if (nested / TRAIN_FILES[0]).exists():
        return nested
    raise FileNotFoundError(f"no CIFAR-10 binary batches under {directory}")


def load_cifar10(directory=None) -> tuple[Dataset, Dataset]:
    """Load train and test splits, scaled to [0, 1] and normalized per channel.

    Normalization statistics are computed on the training split and applied
    to both splits.
    """
    if directory is None:
        directory = default_data_dir()
        if directory is None:
            raise FileNotFoundError(f"no data directory given and {DATA_DIR_ENV} is unset")
    root = _resolve(Path(directory))

    def read(names):
        parts = [read_cifar_batch(root / name) for name in names]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    train_u8, train_y = read(TRAIN_FILES)
    test_u8, test_y = read(TEST_FILES)
    train_x = to_channels_last(train_u8)
    test_x = to_channels_last(test_u8)
    mean, std = channel_stats(train_x)
    return (
        Dataset(normalize(train_x, mean, std), train_y, "train", mean, std),
        Dataset(normalize(test_x, mean, std), test_y, "test", mean, std),
    )


def to_channels_last(images_u8: np.ndarray) -> np.ndarray:
    """``(n, C, H, W)`` uint8 -> ``(C, H, W, n)`` float32 in [0, 1]."""
    out = np.ascontiguousarray(images_u8.transpose(1, 2, 3, 0), dtype=np.float32)
    out /= np.float32(255.0)
    return out


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = (-1,) + (1,) * (images.ndim - 1)
    return ((images - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def subset(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Class-balanced subsample, kept in original order."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        if per_class > idx.size:
            raise ValueError(f"class {c} has {idx.size} examples, {per_class} requested")
        picks.append(idx if per_class == idx.size else rng.choice(idx, per_class, replace=False))
    keep = np.sort(np.concatenate(picks))
    return replace(dataset, images=np.ascontiguousarray(dataset.images[..., keep]), labels=dataset.labels[keep])


def generate_correlated(spec: SyntheticSpec) -> np.ndarray:
    """Draw ``spec.n`` columns from N(0, spec.cov) as a ``d x n`` float64 array."""
    cov = np.asarray(spec.cov, dtype=np.float64)
    if not np.allclose(cov, cov.T):
        raise np.linalg.LinAlgError("covariance is not symmetric")
    chol = np.linalg.cholesky(cov)
    g = np.random.default_rng(spec.seed).standard_normal((spec.d, spec.n))
    return chol @ g
