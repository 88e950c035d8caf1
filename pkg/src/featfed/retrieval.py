"""Exact kNN classification over a bank of labelled feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateInputError, ParameterError, ShapeError

METRICS = {"cosine": kernels.METRIC_COSINE, "euclidean": kernels.METRIC_EUCLIDEAN}


@dataclass(frozen=True)
class FeatureBank:
    vectors: np.ndarray
    labels: np.ndarray
    metric: str = "cosine"

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def knn_fit(vectors, labels, metric: str = "cosine") -> FeatureBank:
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    labels = np.array(labels, dtype=np.int64, copy=True).reshape(-1)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ConfigError("a feature bank needs at least one vector")
    if labels.shape[0] != vectors.shape[0]:
        raise ShapeError(f"{vectors.shape[0]} vectors but {labels.shape[0]} labels")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}")
    if metric == "cosine" and np.any(np.all(vectors == 0.0, axis=1)):
        raise DegenerateInputError("zero vector in a cosine bank")
    vectors.setflags(write=False)
    labels.setflags(write=False)
    return FeatureBank(vectors, labels, metric)


def knn_predict_many(bank: FeatureBank, queries, k: int) -> np.ndarray:
    """Predicted class for every row of ``queries``.

    Neighbours are ranked by (distance, bank position); the vote goes to the
    most frequent label, ties to the smaller summed distance, then the smaller
    class id.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if not 1 <= k <= len(bank):
        raise ParameterError(f"k={k} must lie in [1, {len(bank)}]")
    if queries.shape[1] != bank.dim:
        raise ShapeError(f"query dim {queries.shape[1]} != bank dim {bank.dim}")
    if bank.metric == "cosine" and np.any(np.all(queries == 0.0, axis=1)):
        raise DegenerateInputError("zero query vector under the cosine metric")
    return kernels.knn_predict(bank.vectors, bank.labels, queries, k, METRICS[bank.metric])


def knn_predict(bank: FeatureBank, query, k: int) -> int:
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise ShapeError("knn_predict takes a single query vector; use knn_predict_many for batches")
    return int(knn_predict_many(bank, query[None, :], k)[0])
