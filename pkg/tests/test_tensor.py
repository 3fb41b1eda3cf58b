import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmlego import tensor as T
from mmlego.errors import NonFiniteValue, NonScalarLoss, ShapeMismatch

TOL = 1e-4


def leaf(rng, *shape, name=None, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return T.Tensor(data, requires_grad=True, name=name)


def check(fn, *tensors):
    report = T.gradcheck(fn, list(tensors))
    worst = max(report.values())
    assert worst < TOL, report


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "log_sigmoid": T.log_sigmoid,
    "selu": T.selu,
    "neg": T.neg,
    "softmax": lambda a: T.softmax(a, axis=-1),
    "log_softmax": lambda a: T.log_softmax(a, axis=-1),
    "cumsum": lambda a: T.cumsum(a, axis=-1),
    "transpose": T.transpose,
    "reshape": lambda a: a.reshape(-1),
    "mean_axis": lambda a: a.mean(axis=0),
    "getitem": lambda a: a[[0, 2, 0], 1:],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(0)
    a = leaf(rng, 3, 4)
    w = T.Tensor(rng.normal(size=UNARY[name](T.Tensor(a.data)).shape))
    check(lambda: (UNARY[name](a) * w).sum(), a)


def test_log_gradient_on_positive_input():
    rng = np.random.default_rng(1)
    a = leaf(rng, 4, positive=True)
    check(lambda: (T.log(a) * T.Tensor([1.0, -2.0, 0.5, 3.0])).sum(), a)


def test_relu_and_abs_away_from_kink():
    rng = np.random.default_rng(2)
    a = T.Tensor(np.array([-1.3, -0.4, 0.6, 2.0]), requires_grad=True)
    w = T.Tensor(rng.normal(size=4))
    check(lambda: (T.relu(a) * w).sum(), a)
    check(lambda: T.tabs(a).sum() * 0.7, a)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(op):
    rng = np.random.default_rng(3)
    a = leaf(rng, 2, 3, 4, name="a")
    b = leaf(rng, 3, 4, name="b", positive=(op == "div"))
    fn = getattr(T, op)
    w = T.Tensor(rng.normal(size=(2, 3, 4)))
    check(lambda: (fn(a, b) * w).sum(), a, b)


def test_scalar_operands():
    rng = np.random.default_rng(4)
    a = leaf(rng, 3)
    check(lambda: ((2.0 - a) * 3.0 + 1.0 / (a * a + 2.0)).sum(), a)


def test_matmul_batched_and_shared():
    rng = np.random.default_rng(5)
    a = leaf(rng, 2, 3, 4, name="a")
    b = leaf(rng, 2, 4, 5, name="b")
    w = leaf(rng, 4, 5, name="w")
    check(lambda: ((a @ b) * (a @ w)).sum(), a, b, w)


def test_linear_and_layer_norm():
    rng = np.random.default_rng(6)
    x = leaf(rng, 3, 6, name="x")
    g = leaf(rng, 6, name="g")
    bias = leaf(rng, 6, name="bias")
    w = leaf(rng, 6, 2, name="w")
    b = leaf(rng, 2, name="b")
    mix = T.Tensor(rng.normal(size=(3, 2)))
    check(lambda: (T.linear(T.layer_norm(x, g, bias), w, b) * mix).sum(), x, g, bias, w, b)


def test_concat_expand():
    rng = np.random.default_rng(7)
    a = leaf(rng, 2, 3, name="a")
    b = leaf(rng, 2, 2, name="b")
    w = T.Tensor(rng.normal(size=(4, 2, 5)))
    check(lambda: (T.expand(T.concat([a, b], axis=1), 4) * w).sum(), a, b)


def test_dft2_and_inverse_gradients():
    rng = np.random.default_rng(8)
    x = leaf(rng, 2, 4, 6, name="x")
    wr = T.Tensor(rng.normal(size=(2, 4, 6)))
    wi = T.Tensor(rng.normal(size=(2, 4, 6)))

    def fn():
        re, im = T.dft2(x)
        back = T.idft2_real(re * wr, im + wi)
        return (back * wr).sum() + (im * wi).sum()

    check(fn, x)


def test_dropout_is_identity_in_eval_and_scaled_in_training():
    x = T.Tensor(np.ones((1000,)))
    assert np.array_equal(T.dropout(x, 0.3, None, training=False).data, x.data)
    y = T.dropout(x, 0.3, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}
    assert abs(y.mean() - 1.0) < 0.1


def test_alpha_dropout_keeps_moments():
    x = T.Tensor(np.random.default_rng(1).normal(size=200_000))
    y = T.alpha_dropout(x, 0.25, np.random.default_rng(2), training=True).data
    assert abs(y.mean()) < 0.02
    assert abs(y.std() - 1.0) < 0.02


def test_non_scalar_backward_rejected():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        (a * 2.0).backward()


def test_non_finite_detected():
    with pytest.raises(NonFiniteValue):
        T.log(T.Tensor(np.array([-1.0])))


def test_bad_broadcast_rejected():
    with pytest.raises(ShapeMismatch):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))


def test_gradients_accumulate_into_shared_leaf():
    a = T.Tensor(np.array([2.0]), requires_grad=True)
    (a * a + a).sum().backward()
    assert a.grad[0] == pytest.approx(5.0)


def test_no_grad_records_nothing():
    a = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        b = a * 3.0
    assert not b.requires_grad


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-5, 5)))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(T.Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-3, 3)))
@settings(max_examples=30, deadline=None)
def test_sum_gradient_is_ones(x):
    a = T.Tensor(x, requires_grad=True)
    a.sum().backward()
    assert np.array_equal(a.grad, np.ones_like(x))
