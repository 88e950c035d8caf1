"""Softmax cross-entropy, cosine logits, normalised-softmax and ArcFace losses.

Every function accepts plain arrays or ``autodiff.Tensor`` inputs.  With plain
arrays the result is a float / ndarray; if any input is a ``Tensor`` the result
is a ``Tensor`` that can be back-propagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, LabelError
from .nn import HeadParams, l2_normalize


@dataclass(frozen=True)
class MarginConfig:
    m: float = 0.2
    s: float = 20.0

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"scale s must be positive, got {self.s}")
        if not 0.0 <= self.m < math.pi / 2:
            raise ConfigError(f"margin m must lie in [0, pi/2), got {self.m}")


def _anchors(head):
    return head.anchors if isinstance(head, HeadParams) else head


def _is_graph(*xs) -> bool:
    return any(isinstance(x, ad.Tensor) for x in xs)


def _finish(out, graph):
    if graph:
        return out
    return float(out.value) if out.value.ndim == 0 else out.value


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def _log_softmax_nll(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    # max-subtraction; the shift is a constant so it carries no gradient
    shift = ad.stop_gradient(logits.value.max(axis=1, keepdims=True))
    z = logits - shift
    lse = ad.log(ad.exp(z).sum(axis=1))
    true = z[np.arange(len(labels)), labels]
    return (lse - true).mean()


def softmax_ce(logits, labels, bias=None):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits + bias)``."""
    graph = _is_graph(logits, bias)
    t = ad.as_tensor(logits)
    labels = _check_labels(labels, t.shape[1])
    if bias is not None:
        t = t + bias
    return _finish(_log_softmax_nll(t, labels), graph)


def linear_logits(embeddings, head: HeadParams):
    """``x W^T + b`` for the plain softmax head."""
    out = embeddings @ _anchors(head).T
    if isinstance(head, HeadParams) and head.bias is not None:
        out = out + head.bias
    return out


def _cosine(embeddings, anchors) -> ad.Tensor:
    x = l2_normalize(ad.as_tensor(embeddings), axis=1)
    w = l2_normalize(ad.as_tensor(anchors), axis=1)
    return x @ w.T


def cosine_logits(embeddings, head):
    """``cos(theta_ji)`` between every L2-normalised embedding and anchor row."""
    anchors = _anchors(head)
    return _finish(_cosine(embeddings, anchors), _is_graph(embeddings, anchors))


def nsl_loss(embeddings, head, labels):
    anchors = _anchors(head)
    cos = _cosine(embeddings, anchors)
    labels = _check_labels(labels, cos.shape[1])
    return _finish(_log_softmax_nll(cos, labels), _is_graph(embeddings, anchors))


def arcface_loss(embeddings, head, labels, cfg: MarginConfig = MarginConfig()):
    """Additive angular margin loss.

    The true-class logit is ``s * cos(theta + m)``, expanded as
    ``cos(theta) cos(m) - sin(theta) sin(m)`` with ``sin(theta)`` from
    ``sqrt(1 - cos^2)`` clamped at zero; other logits are ``s * cos(theta)``.
    """
    anchors = _anchors(head)
    cos = _cosine(embeddings, anchors)
    labels = _check_labels(labels, cos.shape[1])
    rows = np.arange(len(labels))
    onehot = np.zeros(cos.shape)
    onehot[rows, labels] = 1.0
    cos_true = cos[rows, labels]
    sin_true = ad.clamped_sqrt(1.0 - cos_true * cos_true)
    shifted = cos_true * math.cos(cfg.m) - sin_true * math.sin(cfg.m)
    # swap the true-class column for cos(theta + m)
    logits = cos * (1.0 - onehot) + ad.Tensor(onehot) * shifted.reshape(-1, 1)
    return _finish(_log_softmax_nll(logits * cfg.s, labels), _is_graph(embeddings, anchors))

