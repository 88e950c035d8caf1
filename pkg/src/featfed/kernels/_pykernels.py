"""numpy implementations of the hot kernels.

Same contracts as the compiled module in ``_ckernels.pyx``; used whenever the
extension is not built or ``FEATFED_PURE_PYTHON=1`` is set.
"""

import numpy as np

METRIC_COSINE = 0
METRIC_EUCLIDEAN = 1


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update of ``p``, ``m``, ``v`` (all float64, same shape)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def class_sums(emb, labels, n_classes):
    """Per-class row sums (accumulated in row order) and per-class counts."""
    sums = np.zeros((n_classes, emb.shape[1]), dtype=np.float64)
    counts = np.zeros(n_classes, dtype=np.int64)
    np.add.at(sums, labels, emb)
    np.add.at(counts, labels, 1)
    return sums, counts


def _sq_norms(x):
    # accumulate over dimensions in index order, like the compiled loop
    acc = np.zeros(x.shape[0])
    for t in range(x.shape[1]):
        acc += x[:, t] * x[:, t]
    return acc


def _distances(bank, queries, metric):
    """[n_queries, n_bank] distances, summed dimension by dimension.

    The fixed summation order makes every distance bitwise reproducible, so
    exact ties between equidistant bank rows stay exact.
    """
    acc = np.zeros((queries.shape[0], bank.shape[0]))
    if metric == METRIC_COSINE:
        bn = bank / np.sqrt(_sq_norms(bank))[:, None]
        qn = queries / np.sqrt(_sq_norms(queries))[:, None]
        for t in range(bank.shape[1]):
            acc += qn[:, t, None] * bn[None, :, t]
        return 1.0 - acc
    for t in range(bank.shape[1]):
        diff = queries[:, t, None] - bank[None, :, t]
        acc += diff * diff
    return np.sqrt(acc)


def knn_predict(bank, labels, queries, k, metric):
    """Majority vote over the ``k`` nearest bank rows for every query row.

    Neighbours are ranked by (distance, bank index).  Vote ties go to the
    label with the smaller summed neighbour distance, then the smaller label.
    """
    dist = _distances(bank, queries, metric)
    n_bank = bank.shape[0]
    order_idx = np.arange(n_bank)
    out = np.empty(queries.shape[0], dtype=np.int64)
    for q in range(queries.shape[0]):
        row = dist[q]
        nearest = np.lexsort((order_idx, row))[:k]
        votes: dict[int, list] = {}
        for j in nearest:
            lab = int(labels[j])
            entry = votes.setdefault(lab, [0, 0.0])
            entry[0] += 1
            entry[1] += float(row[j])
        out[q] = min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], lab))
    return out
