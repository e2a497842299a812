"""Datasets: synthetic Gaussian blobs, the CIFAR-10 binary format, feature
normalization, seeded batch iteration, and a bit-exact cache format.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm as _normal_dist

from . import container
from . import rng as rngmod

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 channel-major pixels
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    name: str
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray    # (n,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("Dataset: features must be (n, d), labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("Dataset: feature/label count mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("Dataset: label out of range")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class BlobSpec:
    """Generative description of a blob dataset: class means on a circle,
    unit isotropic covariance, equal priors."""

    means: np.ndarray  # (C, dim)
    n_classes: int
    dim: int


def gaussian_blobs(n: int, n_classes: int, dim: int, separation: float, seed: int,
                   shift: float = 0.0) -> tuple[Dataset, BlobSpec]:
    """Equal-sized Gaussian classes with means spaced on a circle.

    Means sit on a circle of radius separation/2 in the first two feature
    coordinates (remaining coordinates zero); every class has unit isotropic
    covariance.  n is truncated down to a multiple of n_classes so class
    sizes are exactly equal.  `shift` is added to every feature, which is
    how out-of-distribution variants are produced.
    """
    if n_classes < 2:
        raise ValueError("gaussian_blobs: need at least 2 classes")
    if dim < 2:
        raise ValueError("gaussian_blobs: need dim >= 2 for the circular layout")
    per_class = n // n_classes
    if per_class < 1:
        raise ValueError("gaussian_blobs: n too small for the class count")

    radius = separation / 2.0
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)

    gen = rngmod.stream(seed, "blobs")
    feats = np.vstack([means[c] + gen.normal(size=(per_class, dim)) for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    order = gen.permutation(per_class * n_classes)
    feats = feats[order] + shift
    labels = labels[order]
    ds = Dataset(name=f"blobs(c={n_classes},d={dim},sep={separation:g})",
                 features=feats, labels=labels, n_classes=n_classes)
    return ds, BlobSpec(means=means, n_classes=n_classes, dim=dim)


def bayes_accuracy(spec: BlobSpec, n_samples: int, seed: int) -> float:
    """Monte-Carlo accuracy of the exact posterior classifier for a BlobSpec.

    With unit isotropic covariance and equal priors the Bayes rule is
    nearest-mean; for two classes this converges to Phi(separation/2).
    """
    gen = rngmod.stream(seed, "bayes-oracle")
    per = n_samples // spec.n_classes
    correct = 0
    total = 0
    for c in range(spec.n_classes):
        x = spec.means[c] + gen.normal(size=(per, spec.dim))
        d2 = ((x[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=2)
        correct += int((d2.argmin(axis=1) == c).sum())
        total += per
    return correct / total


def two_class_bayes_accuracy(separation: float) -> float:
    """Closed form for C=2: Phi(separation/2)."""
    return float(_normal_dist.cdf(separation / 2.0))


def load_cifar10(dir_path, split: str, limit: int | None = None) -> Dataset:
    """Read the CIFAR-10 binary batches from a directory.

    Records are 3073 bytes: one label byte then 3072 pixel bytes
    (channel-major: 1024 red, 1024 green, 1024 blue, each row-major 32x32).
    Features are scaled to [0, 1].  `limit` keeps only the first rows.
    """
    if split not in ("train", "test"):
        raise ValueError(f"load_cifar10: split must be train or test, got {split!r}")
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    root = Path(dir_path)
    feats, labels = [], []
    for fname in files:
        path = root / fname
        if not path.exists():
            raise FileNotFoundError(f"load_cifar10: missing {path}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            raise ValueError(
                f"load_cifar10: {path} holds {raw.size} bytes, not a multiple of the "
                f"{CIFAR_RECORD_BYTES}-byte record size"
            )
        rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:].astype(np.float64) / 255.0)
    features = np.vstack(feats)
    labels = np.concatenate(labels)
    if labels.max() > 9:
        raise ValueError("load_cifar10: label byte above 9, file is not CIFAR-10")
    if limit is not None:
        features = features[:limit]
        labels = labels[:limit]
    return Dataset(name=f"cifar10-{split}", features=features, labels=labels, n_classes=10)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_fit(train_features: np.ndarray) -> NormStats:
    """Per-feature mean/std from the training set only; zero-variance
    features keep std 1 and trigger a warning."""
    mean = train_features.mean(axis=0)
    std = train_features.std(axis=0)
    degenerate = std == 0.0
    if degenerate.any():
        warnings.warn(f"normalize_fit: {int(degenerate.sum())} zero-variance features, std left at 1")
        std = np.where(degenerate, 1.0, std)
    return NormStats(mean=mean, std=std)


def normalize_apply(features: np.ndarray, stats: NormStats) -> np.ndarray:
    return (features - stats.mean) / stats.std


def batch_iterator(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield (features, labels) minibatches from a fresh shuffle of the
    dataset, seeded by (seed, epoch).  The final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_iterator: batch_size must be positive")
    order = rngmod.stream(seed, rngmod.SHUFFLE, epoch).permutation(dataset.n)
    for start in range(0, dataset.n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]


def save_dataset(path, dataset: Dataset) -> None:
    container.write_container(
        path,
        meta={"kind": "dataset", "version": 1, "name": dataset.name,
              "n_classes": dataset.n_classes},
        arrays={"features": dataset.features, "labels": dataset.labels},
    )


def load_dataset(path) -> Dataset:
    meta, arrays = container.read_container(path)
    if meta.get("kind") != "dataset":
        raise container.ContainerError(f"{path}: not a dataset cache")
    return Dataset(name=meta["name"], features=arrays["features"],
                   labels=arrays["labels"], n_classes=meta["n_classes"])
