import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdnkit import diffcore as dc
from mdnkit.diffcore import DimensionError, NonFiniteError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def fd_check(fn, *arrays, tol=1e-6):
    """Compare reverse-mode gradients of scalar ``fn(*tensors)`` with central differences."""
    ts = [leaf(a.copy()) for a in arrays]
    dc.backward(fn(*ts))
    for t in ts:
        num = dc.numerical_grad(lambda: float(fn(*[Tensor(u.data) for u in ts]).data), t.data)
        denom = np.maximum(np.maximum(np.abs(t.grad), np.abs(num)), 1e-8)
        assert np.max(np.abs(t.grad - num) / denom) < tol


# ------------------------------------------------------------------ matmul
def test_matmul_identity():
    B = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(dc.matmul(np.eye(2), B).data, B)


def test_matmul_hand_example():
    out = dc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_matches_finite_differences(rng):
    fd_check(lambda a, b: dc.reduce_sum(dc.tanh(a @ b)), rng.normal(size=(5, 7)), rng.normal(size=(7, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ------------------------------------------------------------------ elementwise
def test_exp_zero():
    assert dc.exp(np.array(0.0)).data == 1.0


def test_log_exp_roundtrip():
    x = np.linspace(-10, 10, 201)
    assert np.max(np.abs(dc.log(dc.exp(x)).data - x)) < 1e-12


def test_tanh_gradient_at_half():
    fd_check(lambda x: dc.reduce_sum(dc.tanh(x)), np.array([0.5]))


@pytest.mark.parametrize("op", [dc.exp, dc.tanh, dc.sigmoid, dc.square, dc.erf, dc.softplus, dc.elu, dc.neg])
def test_unary_gradients(op, rng):
    fd_check(lambda x: dc.reduce_sum(op(x)), rng.normal(size=(3, 4)))


def test_log_and_sqrt_gradients(rng):
    fd_check(lambda x: dc.reduce_sum(dc.log(x) + dc.sqrt(x)), rng.uniform(0.5, 2.0, size=(4,)))


@pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.div])
def test_binary_gradients(op, rng):
    fd_check(lambda a, b: dc.reduce_sum(op(a, b)), rng.normal(size=(3, 4)), rng.uniform(0.5, 2, size=(3, 4)))


def test_trailing_broadcast_gradient_sums_batch(rng):
    fd_check(lambda a, b: dc.reduce_sum(dc.square(a + b)), rng.normal(size=(5, 3)), rng.normal(size=(3,)))


def test_scalar_broadcast(rng):
    fd_check(lambda a, s: dc.reduce_sum(a * s), rng.normal(size=(2, 3)), np.array(1.7))


def test_incompatible_broadcast_rejected():
    with pytest.raises(DimensionError):
        dc.add(np.ones((3, 4)), np.ones((3, 1)))


def test_softplus_no_overflow():
    v = dc.softplus(np.array([-800.0, 0.0, 800.0])).data
    assert v[0] >= 0 and v[1] == math.log(2.0) and v[2] == 800.0


# ------------------------------------------------------------------ reductions
def test_sum():
    assert dc.reduce_sum(np.array([1.0, 2.0, 3.0])).data == 6.0


def test_max_tie_goes_to_first():
    x = leaf([3.0, 1.0, 3.0])
    m = dc.reduce_max(x)
    dc.backward(m)
    assert m.data == 3.0 and np.array_equal(x.grad, [1.0, 0.0, 0.0])


def test_mean_gradient():
    x = leaf(np.ones(4))
    dc.backward(dc.reduce_mean(x))
    assert np.array_equal(x.grad, np.full(4, 0.25))


def test_axis_reductions(rng):
    fd_check(lambda x: dc.reduce_sum(dc.square(dc.reduce_mean(x, axis=1))) + dc.reduce_sum(dc.reduce_max(x, 0)),
             rng.normal(size=(3, 5)))


def test_reduce_bad_axis():
    with pytest.raises(DimensionError):
        dc.reduce_sum(np.ones((2, 3)), axis=2)


def test_reduce_empty_axis():
    with pytest.raises(DimensionError):
        dc.reduce_max(np.ones((0, 3)), axis=0)


# ------------------------------------------------------------------ backward
def test_grad_of_sum_is_ones():
    w = leaf(np.arange(4.0))
    dc.backward(dc.reduce_sum(w))
    assert np.array_equal(w.grad, np.ones(4))


def test_grad_of_sum_squares():
    w = leaf(np.array([1.0, -2.0, 3.0]))
    dc.backward(dc.reduce_sum(dc.square(w)))
    assert np.array_equal(w.grad, 2 * w.data)


def test_repeated_backward_accumulates():
    w = leaf(np.array([1.0, 2.0]))
    dc.backward(dc.reduce_sum(w))
    dc.backward(dc.reduce_sum(w))
    assert np.array_equal(w.grad, [2.0, 2.0])
    w.zero_grad()
    assert w.grad is None


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        dc.backward(leaf(np.ones(3)) * 2.0)


def test_shared_subexpression(rng):
    fd_check(lambda a: dc.reduce_sum(a * a * a + dc.exp(a) * a), rng.normal(size=(4,)))


def test_reshape_getitem_concat_stack(rng):
    def f(a, b):
        c = dc.concat([a, b], axis=1)
        s = dc.stack([a, b], axis=0)
        return dc.reduce_sum(dc.square(dc.reshape(c, (-1,)))) + dc.reduce_sum(dc.tanh(s[1, :, 1:]))
    fd_check(f, rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_composite_mlp_loss_gradient(rng):
    def f(w1, b1, w2, b2, w3):
        h = dc.tanh(dc.linear(x, w1, b1))
        h = dc.tanh(dc.linear(h, w2, b2))
        return dc.reduce_mean(dc.square(h @ w3 - 0.3))
    x = rng.normal(size=(6, 4))
    fd_check(f, rng.normal(size=(4, 16)) / 2, rng.normal(size=(16,)), rng.normal(size=(16, 16)) / 4,
             rng.normal(size=(16,)), rng.normal(size=(16, 1)) / 4, tol=1e-4)


def test_custom_op():
    x = leaf(np.array([1.0, 2.0]))
    y = dc.custom(x.data ** 3, [x], [lambda g: g * 3 * x.data ** 2], "cube")
    dc.backward(dc.reduce_sum(y))
    assert np.array_equal(x.grad, [3.0, 12.0])


# ------------------------------------------------------------------ debug / determinism
def test_debug_mode_flags_log_of_negative():
    with dc.debug_mode(True):
        with pytest.raises(NonFiniteError):
            dc.log(np.array([-1.0]))
    with np.errstate(invalid="ignore"):
        assert np.isnan(dc.log(np.array([-1.0])).data[0])     # outside debug mode: plain NaN


def test_replay_is_bit_identical(rng):
    a, b = rng.normal(size=(8, 5)), rng.normal(size=(5, 2))

    def run():
        ta, tb = leaf(a), leaf(b)
        loss = dc.reduce_sum(dc.erf(ta @ tb) * dc.sigmoid(ta @ tb))
        dc.backward(loss)
        return loss.data.copy(), ta.grad.copy(), tb.grad.copy()

    for u, v in zip(run(), run()):
        assert np.array_equal(u, v)


def test_grad_shape_matches_data(rng):
    w = leaf(rng.normal(size=(3, 2)))
    dc.backward(dc.reduce_sum(dc.linear(rng.normal(size=(4, 3)), w)))
    assert w.grad.shape == w.data.shape


# ------------------------------------------------------------------ properties
finite = st.floats(-3, 3, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=4), elements=finite))
def test_property_elementwise_gradients_match_fd(x):
    fd_check(lambda t: dc.reduce_sum(dc.tanh(t) * dc.exp(0.3 * t) + dc.square(dc.sigmoid(t))), x, tol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_property_matmul_gradients(m, k, n, seed):
    r = np.random.default_rng(seed)
    fd_check(lambda a, b: dc.reduce_sum(dc.tanh(a @ b)), r.normal(size=(m, k)), r.normal(size=(k, n)), tol=1e-5)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite))
def test_property_backward_leaves_finite_grads(x):
    t = leaf(x)
    dc.backward(dc.reduce_sum(dc.softplus(t) + dc.erf(t) * dc.elu(t)))
    assert np.all(np.isfinite(t.grad))
