"""Dense MLP backbone, gradients, Adam and L2 normalisation.

Parameter containers are plain dataclasses of float64 arrays.  Any nesting of
those dataclasses, lists, tuples and bare arrays is a *parameter tree*; the
tree helpers below let averaging, Adam and ``grad`` treat them uniformly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import DegenerateInputError, InvalidArchitectureError, NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class BackboneParams:
    """Layer weights (``out x in``) and biases; the last layer emits the embedding."""

    weights: list
    biases: list

    @property
    def layers(self):
        return list(zip(self.weights, self.biases))

    @property
    def arch(self) -> list[int]:
        shapes = [ad.value_of(w).shape for w in self.weights]
        return [shapes[0][1]] + [s[0] for s in shapes]

    @property
    def embedding_dim(self) -> int:
        return ad.value_of(self.weights[-1]).shape[0]

    def copy(self) -> "BackboneParams":
        return tree_map(np.copy, self)


@dataclass
class HeadParams:
    """Per-class anchor rows ``[n_classes x d]``; ``bias`` only for the softmax head."""

    anchors: np.ndarray
    bias: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return ad.value_of(self.anchors).shape[0]

    def copy(self) -> "HeadParams":
        return tree_map(np.copy, self)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        leaves = tree_leaves(params)
        return cls([np.zeros_like(x) for x in leaves], [np.zeros_like(x) for x in leaves], 0)

    def copy(self) -> "AdamState":
        return AdamState([x.copy() for x in self.m], [x.copy() for x in self.v], self.step)


# parameter trees


def tree_leaves(tree) -> list:
    if tree is None:
        return []
    if isinstance(tree, (list, tuple)):
        return [leaf for item in tree for leaf in tree_leaves(item)]
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        return [leaf for f in dataclasses.fields(tree) for leaf in tree_leaves(getattr(tree, f.name))]
    return [tree]


def tree_unflatten(tree, leaves):
    """Rebuild ``tree``'s structure with ``leaves`` in flattening order."""
    it = iter(leaves)

    def build(node):
        if node is None:
            return None
        if isinstance(node, (list, tuple)):
            return type(node)(build(item) for item in node)
        if dataclasses.is_dataclass(node) and not isinstance(node, type):
            return dataclasses.replace(node, **{f.name: build(getattr(node, f.name)) for f in dataclasses.fields(node)})
        return next(it)

    out = build(tree)
    if next(it, None) is not None:
        raise ShapeError("more leaves than tree slots")
    return out


def tree_map(fn, tree, *rest):
    others = [tree_leaves(r) for r in rest]
    return tree_unflatten(tree, [fn(x, *(o[i] for o in others)) for i, x in enumerate(tree_leaves(tree))])


def n_parameters(tree) -> int:
    return sum(int(np.size(ad.value_of(x))) for x in tree_leaves(tree))


# operations


def init_params(seed: int, arch: list[int]) -> BackboneParams:
    """Glorot-uniform weights, zero biases, drawn layer by layer from ``default_rng(seed)``.

    Values are rounded to float32 so that a freshly initialised model survives
    the float32 wire format unchanged.
    """
    if len(arch) < 2:
        raise InvalidArchitectureError(f"architecture needs an input and at least one layer, got {arch}")
    if any(int(n) <= 0 for n in arch):
        raise InvalidArchitectureError(f"zero-size layer in architecture {arch}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        weights.append(w.astype(np.float32).astype(np.float64))
        biases.append(np.zeros(fan_out))
    return BackboneParams(weights, biases)


def forward(params: BackboneParams, batch):
    """Embeddings ``[N x d]``; ReLU on hidden layers, linear last layer.

    ``batch`` may be a ``LabeledBatch``/``Dataset`` (its ``inputs`` are used)
    or an array.  Works on ``autodiff.Tensor`` parameters too.
    """
    h = getattr(batch, "inputs", batch)
    if not isinstance(h, ad.Tensor):
        h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeError(f"expected a 2-d input batch, got shape {h.shape}")
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(params.layers):
        w_shape = ad.value_of(w).shape
        if h.shape[1] != w_shape[1]:
            raise ShapeError(f"layer {i} expects input dim {w_shape[1]}, got {h.shape[1]}")
        h = h @ w.T + b
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def grad(loss_fn, params, batch=None):
    """Gradient of ``loss_fn(params, batch)`` with respect to every leaf of ``params``.

    ``loss_fn`` receives a copy of the tree whose leaves are ``autodiff.Tensor``
    objects and must return a scalar ``Tensor``.
    """
    return loss_and_grad(loss_fn, params, batch)[1]


def loss_and_grad(loss_fn, params, batch=None):
    leaves = [ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in tree_leaves(params)]
    tparams = tree_unflatten(params, leaves)
    loss = ad.as_tensor(loss_fn(tparams, batch) if batch is not None else loss_fn(tparams))
    if loss.value.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    value = float(loss.value.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}", value)
    if loss.requires_grad:
        loss.backward()
    grads = [np.zeros_like(t.value) if t.grad is None else t.grad for t in leaves]
    return value, tree_unflatten(params, grads)


def adam_step(params, grads, state: AdamState | None, lr: float):
    """One Adam update. Returns new ``(params, state)``; inputs are not modified."""
    p_leaves = tree_leaves(params)
    g_leaves = tree_leaves(grads)
    if state is None:
        state = AdamState.zeros_like(params)
    if len(p_leaves) != len(g_leaves) or len(p_leaves) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different structure")
    new_p, new_m, new_v = [], [], []
    step = state.step + 1
    for p, g, m, v in zip(p_leaves, g_leaves, state.m, state.v):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape} vs {m.shape}")
        if not np.all(np.isfinite(g)):
            bad = g[~np.isfinite(g)].ravel()[0]
            raise NumericError(f"non-finite gradient entry {bad}", float(bad))
        p2 = np.array(p, dtype=np.float64, order="C", copy=True)
        m2 = np.array(m, dtype=np.float64, order="C", copy=True)
        v2 = np.array(v, dtype=np.float64, order="C", copy=True)
        kernels.adam_update(
            p2.reshape(-1), np.ascontiguousarray(g).reshape(-1), m2.reshape(-1), v2.reshape(-1),
            float(lr), ADAM_BETA1, ADAM_BETA2, ADAM_EPS, step,
        )
        new_p.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    return tree_unflatten(params, new_p), AdamState(new_m, new_v, step)


def l2_normalize(v, axis: int = -1):
    """Scale ``v`` (or each slice along ``axis``) to unit L2 norm.

    Zero vectors raise ``DegenerateInputError`` instead of being patched.
    """
    if isinstance(v, ad.Tensor):
        sq = (v * v).sum(axis=axis, keepdims=True)
        if np.any(sq.value == 0.0):
            raise DegenerateInputError("cannot normalise a zero vector")
        return v / ad.sqrt(sq)
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalise a zero vector")
    return v / norm
