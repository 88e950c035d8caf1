import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featfed import autodiff as ad
from featfed.errors import DegenerateInputError, InvalidArchitectureError, NumericError, ShapeError
from featfed.nn import (
    AdamState,
    BackboneParams,
    adam_step,
    forward,
    grad,
    init_params,
    l2_normalize,
    tree_leaves,
)

from oracles import adam_scalar, central_fd, glorot_reference, matmul_forward, rel_error


def test_init_is_deterministic():
    a = init_params(7, [4, 8, 16])
    b = init_params(7, [4, 8, 16])
    for x, y in zip(tree_leaves(a), tree_leaves(b)):
        assert np.array_equal(x, y)


def test_init_depends_on_seed():
    a = init_params(7, [4, 8, 16])
    b = init_params(8, [4, 8, 16])
    assert not np.array_equal(a.weights[0], b.weights[0])


def test_init_matches_reference_glorot():
    params = init_params(7, [4, 8, 16])
    ref = glorot_reference(7, [4, 8, 16])
    assert params.arch == [4, 8, 16]
    for (w, b), (rw, rb) in zip(params.layers, ref):
        assert np.array_equal(w, rw)
        assert np.array_equal(b, rb)
        limit = math.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= limit)


@pytest.mark.parametrize("arch", [[4, 0, 16], [0, 3], [5]])
def test_init_rejects_bad_architecture(arch):
    with pytest.raises(InvalidArchitectureError):
        init_params(0, arch)


def test_forward_identity_layer():
    params = BackboneParams([np.eye(3)], [np.zeros(3)])
    v = np.array([[1.5, -2.0, 0.25]])
    assert np.array_equal(forward(params, v), v)


def test_forward_zero_weights():
    params = BackboneParams([np.zeros((5, 3)), np.zeros((2, 5))], [np.zeros(5), np.zeros(2)])
    assert np.array_equal(forward(params, np.ones((4, 3))), np.zeros((4, 2)))


def test_forward_matches_loop_oracle(rng):
    params = init_params(3, [4, 6, 5, 3])
    params.biases = [rng.normal(size=b.shape) for b in params.biases]
    x = rng.normal(size=(3, 4))
    expected = matmul_forward(params.weights, params.biases, x)
    assert np.max(np.abs(forward(params, x) - expected)) < 1e-10


def test_forward_is_pure(rng):
    params = init_params(1, [4, 8, 2])
    x = rng.normal(size=(6, 4))
    assert np.array_equal(forward(params, x), forward(params, x))


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(init_params(0, [4, 3]), np.ones((2, 5)))


def test_grad_quadratic():
    g = grad(lambda w: w * w, np.array(3.0))
    assert g == pytest.approx(6.0)


def test_grad_constant_loss_is_zero():
    params = init_params(0, [3, 4, 2])
    g = grad(lambda p: ad.Tensor(2.5), params)
    assert all(np.all(x == 0) for x in tree_leaves(g))


def test_grad_shapes_mirror_params():
    params = init_params(0, [3, 4, 2])
    g = grad(lambda p, x: (forward(p, x) * forward(p, x)).sum(), params, np.ones((2, 3)))
    assert [x.shape for x in tree_leaves(g)] == [x.shape for x in tree_leaves(params)]


def test_grad_non_finite_loss():
    with pytest.raises(NumericError) as info:
        grad(lambda w: ad.log(w - 1.0), np.array(1.0))
    assert info.value.value == -math.inf


@pytest.mark.parametrize("seed", range(10))
def test_grad_mlp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = init_params(seed, [3, 5, 4])
    params.biases = [rng.normal(size=b.shape) * 0.1 for b in params.biases]
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 4))

    def loss(p):
        diff = forward(p, x) - target
        return (diff * diff).mean()

    g = grad(loss, params)
    for i in range(len(params.weights)):
        def f_w(w, i=i):
            q = params.copy()
            q.weights[i] = w
            return float(loss(q))

        assert rel_error(g.weights[i], central_fd(f_w, params.weights[i])) < 1e-4


def test_adam_zero_gradient_keeps_params():
    params = init_params(2, [3, 4])
    zeros = [np.zeros_like(x) for x in tree_leaves(params)]
    new, state = adam_step(params, BackboneParams(zeros[:1], zeros[1:]), None, 1e-3)
    assert state.step == 1
    for a, b in zip(tree_leaves(new), tree_leaves(params)):
        assert np.array_equal(a, b)


def test_adam_first_step_matches_scalar_oracle():
    new, state = adam_step(np.array(0.5), np.array(1.0), None, 1e-4)
    expected = adam_scalar(0.5, [1.0], 1e-4)
    assert float(new) == pytest.approx(expected, abs=1e-15)
    assert 0.5 - float(new) == pytest.approx(1e-4 / (1 + 1e-8), rel=1e-9)
    assert state.step == 1


def test_adam_multi_step_matches_scalar_oracle(rng):
    gs = rng.normal(size=20)
    p, state = np.array(0.3), None
    for g in gs:
        p, state = adam_step(p, np.array(g), state, 1e-2)
    assert float(p) == pytest.approx(adam_scalar(0.3, list(gs), 1e-2), abs=1e-14)


def test_adam_is_deterministic_and_pure(rng):
    p = rng.normal(size=(3, 2))
    g = rng.normal(size=(3, 2))
    state = AdamState.zeros_like(p)
    a = adam_step(p, g, state, 1e-3)
    b = adam_step(p, g, state, 1e-3)
    assert np.array_equal(a[0], b[0])
    assert state.step == 0 and np.all(state.m[0] == 0)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), np.array([0.0, np.nan]), None, 1e-3)


def test_l2_normalize_examples():
    assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(l2_normalize(u), u)
    with pytest.raises(DegenerateInputError):
        l2_normalize(np.zeros(3))


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(1e-3, 1e3))
def test_l2_normalize_properties(v, c):
    norm = np.linalg.norm(v)
    if norm < 1e-6:
        return
    out = l2_normalize(v)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-9
    assert np.max(np.abs(out * norm - v)) < 1e-9 * max(1.0, norm)
    assert np.max(np.abs(l2_normalize(out) - out)) < 1e-9
    assert np.max(np.abs(l2_normalize(c * v) - out)) < 1e-9
