"""Datasets, non-IID partitioning, and stratified sample drawing."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedPayloadError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class PartitionPlan:
    assignment: Tuple[np.ndarray, ...]
    mode: str
    k: Optional[int] = None
    seed: Optional[int] = None

    @property
    def num_clients(self) -> int:
        return len(self.assignment)


@dataclass(frozen=True)
class SampleBatch:
    owner: int
    features: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    per_class: int,
    spread: float,
    seed: int,
    mean_scale: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian blob per class, shuffled.

    Class means are drawn uniformly from ``[0, mean_scale]`` per coordinate,
    giving every class a shared non-negative component like image pixels.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.0, mean_scale, size=(num_classes, input_dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + spread * rng.normal(size=(labels.size, input_dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def train_test_split_per_class(dataset: Dataset, test_per_class: int) -> Tuple[Dataset, Dataset]:
    """Hold out the first ``test_per_class`` rows of every class (rows are pre-shuffled)."""
    test_idx = []
    for c in range(dataset.num_classes):
        test_idx.extend(np.flatnonzero(dataset.labels == c)[:test_per_class])
    test_mask = np.zeros(len(dataset), dtype=bool)
    test_mask[np.asarray(test_idx, dtype=np.int64)] = True
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload < expected:
        raise TruncatedPayloadError(f"{path}: header declares {expected} bytes, payload has {payload}")
    if payload > expected:
        raise CountMismatchError(f"{path}: header declares {expected} bytes, payload has {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.input_dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, num_classes: Optional[int] = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = [r for r in reader if r]
    features = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    features = features.reshape(len(rows), len(header) - 1)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(features, labels, num_classes)


def sort_by_label(labels: np.ndarray) -> np.ndarray:
    # stable sort == ordering by (label, original index)
    return np.argsort(np.asarray(labels), kind="stable")


def partition_sorted(labels: np.ndarray, num_clients: int) -> PartitionPlan:
    """Sort by label and cut into ``num_clients`` contiguous, near-equal blocks.

    When the split is uneven the first ``n % num_clients`` clients get one extra
    example.
    """
    labels = np.asarray(labels)
    if not 1 <= num_clients <= labels.size:
        raise ValueError(f"cannot split {labels.size} examples across {num_clients} clients")
    blocks = np.array_split(sort_by_label(labels), num_clients)
    return PartitionPlan(tuple(blocks), mode="sorted")


def partition_shards(labels: np.ndarray, num_clients: int, k: int, seed: int) -> PartitionPlan:
    """Sort by label, cut ``k * num_clients`` equal shards, deal ``k`` per client.

    Trailing examples that do not fill a whole shard stay unassigned.
    """
    labels = np.asarray(labels)
    n_shards = k * num_clients
    if k < 1 or num_clients < 1:
        raise ValueError("k and num_clients must be positive")
    shard_size = labels.size // n_shards
    if shard_size == 0:
        raise ValueError(f"{labels.size} examples cannot form {n_shards} non-empty shards")
    order = sort_by_label(labels)[: n_shards * shard_size]
    shards = order.reshape(n_shards, shard_size)
    deal = np.random.default_rng(seed).permutation(n_shards)
    assignment = tuple(
        np.concatenate(shards[deal[j * k:(j + 1) * k]]) for j in range(num_clients)
    )
    return PartitionPlan(assignment, mode="shards", k=k, seed=seed)


def sample_size(rate: float, n: int) -> int:
    if not 0 < rate <= 1:
        raise ValueError(f"sampling rate must lie in (0, 1], got {rate}")
    # tolerance keeps e.g. 0.07 * 100 from rounding up to 8
    return min(n, max(1, math.ceil(rate * n - 1e-9)))


def apportion(counts, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` seats over ``counts``.

    Ties in the remainder go to the lower index.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    quotas = total * counts // n
    remainders = total * counts % n
    short = total - int(quotas.sum())
    order = sorted(range(counts.size), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        quotas[i] += 1
    return quotas


def draw_sample(dataset: Dataset, rate: float, seed, owner: int = 0) -> SampleBatch:
    """Label-stratified uniform sample of ``ceil(rate * n)`` examples."""
    n = len(dataset)
    s = sample_size(rate, n)
    present, counts = np.unique(dataset.labels, return_counts=True)
    quotas = apportion(counts, s)
    rng = np.random.default_rng(seed)
    picked = []
    for label, quota in zip(present, quotas):
        pool = np.flatnonzero(dataset.labels == label)
        picked.append(rng.choice(pool, size=int(quota), replace=False))
    idx = np.concatenate(picked)
    return SampleBatch(owner, dataset.features[idx], dataset.labels[idx])


def draw_uniform(dataset: Dataset, rate: float, seed) -> Dataset:
    """Plain uniform subset without replacement (used for FLTrust's root set)."""
    s = sample_size(rate, len(dataset))
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=s, replace=False))
    return dataset.subset(idx)
