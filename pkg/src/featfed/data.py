"""Datasets: synthetic clusters, CSV ingestion, stratified split, Dirichlet shards."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, StratificationError


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not align")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_samples(self) -> int:
        return len(self)

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# a LabeledBatch is just a small Dataset
LabeledBatch = Dataset


@dataclass
class Partition:
    shards: list

    def __len__(self) -> int:
        return len(self.shards)


def class_centers(n_classes: int, d_in: int, seed: int) -> np.ndarray:
    """Random Gaussian centres rescaled so the closest pair is exactly 1 apart."""
    rng = np.random.default_rng([seed, 0])
    centers = rng.normal(size=(n_classes, d_in))
    if n_classes > 1:
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        centers = centers / dist.min()
    else:
        centers = centers / np.linalg.norm(centers)
    return centers


def synth_generate(n_classes: int, per_class: int, d_in: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, ``per_class`` samples around each class centre."""
    if n_classes <= 0 or per_class <= 0 or d_in <= 0:
        raise ConfigError("n_classes, per_class and d_in must all be positive")
    if spread < 0:
        raise ConfigError(f"spread must be non-negative, got {spread}")
    centers = class_centers(n_classes, d_in, seed)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(n_classes), per_class)
    noise = rng.normal(size=(labels.size, d_in)) * spread
    return Dataset(centers[labels] + noise, labels, n_classes)


def split_indices(labels, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, val) index arrays; val gets ``round(count * fraction)`` per class."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise StratificationError(f"class {c} has {idx.size} sample(s); need at least 2 to stratify")
        n_val = int(np.floor(idx.size * test_fraction + 0.5))
        n_val = min(max(n_val, 1), idx.size - 1)
        idx = rng.permutation(idx)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    train_idx, val_idx = split_indices(dataset.labels, test_fraction, seed)
    return dataset.subset(train_idx), dataset.subset(val_idx)


def dirichlet_partition(train: Dataset, n_clients: int, alpha: float, seed: int) -> Partition:
    """Label-skewed shards.

    For every class (ascending) the class's indices are shuffled, a share
    vector ``p ~ Dir(alpha * 1)`` over clients is drawn, and the indices are
    cut at ``floor(cumsum(p) * count)``.
    """
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    labels = np.asarray(train.labels)
    for c in range(train.n_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        p = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = (np.cumsum(p) * idx.size).astype(np.int64)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            shards[client].append(part)
    return Partition([np.sort(np.concatenate(parts)).astype(np.int64) for parts in shards])


def load_csv(path) -> Dataset:
    """Read ``f0,...,f{k-1},label`` rows; labels are re-indexed densely in sorted order."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if not header or header[-1].strip() != "label":
            raise ParseError("header must end with a 'label' column", 1)
        n_feat = len(header) - 1
        expected = [f"f{i}" for i in range(n_feat)]
        if [h.strip() for h in header[:-1]] != expected:
            raise ParseError(f"feature columns must be named {','.join(expected)}", 1)
        rows, raw_labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_feat + 1:
                raise ParseError(f"expected {n_feat + 1} fields, found {len(row)}", line_no)
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise ParseError(f"non-numeric feature ({exc})", line_no) from None
            try:
                raw_labels.append(int(row[-1]))
            except ValueError:
                raise ParseError(f"label {row[-1]!r} is not an integer", line_no) from None
    if not rows:
        raise ParseError("no data rows", 2)
    uniq = sorted(set(raw_labels))
    remap = {lab: i for i, lab in enumerate(uniq)}
    return Dataset(np.array(rows, dtype=np.float64), np.array([remap[v] for v in raw_labels]), len(uniq))


def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.d_in)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
