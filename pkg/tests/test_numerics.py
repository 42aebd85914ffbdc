import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoseg.numerics import (NumericsError, Tensor, concat, cosine_sim, grad_check, layer_norm,
                               l2_normalize, softmax_rows, straight_through)


def test_softmax_rows_examples():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[1.0, 0.0]]), [[math.e / (math.e + 1), 1 / (math.e + 1)]],
                               atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[1.0, 0.0]]), [[0.731059, 0.268941]], atol=1e-6)
    out = softmax_rows([[1.0, 0.0]], temperature=0.1)
    np.testing.assert_allclose(out, [[0.999955, 0.0000454]], atol=1e-6)


def test_softmax_rows_errors():
    with pytest.raises(NumericsError, match="non-finite logits"):
        softmax_rows([[np.nan, 0.0]])
    with pytest.raises(NumericsError, match="invalid temperature"):
        softmax_rows([[1.0, 0.0]], temperature=0.0)
    with pytest.raises(NumericsError, match="invalid temperature"):
        softmax_rows([[1.0, 0.0]], temperature=-1.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-300, 300)),
       st.floats(0.05, 10.0))
def test_softmax_rows_sum_to_one(x, temperature):
    out = softmax_rows(x, temperature)
    assert out.shape == x.shape
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((out >= 0) & (out <= 1))


def test_cosine_sim():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([3, 4], [4, 3]) == pytest.approx(0.96, abs=1e-15)
    with pytest.raises(NumericsError, match="degenerate vector"):
        cosine_sim([0, 0], [1, 0])


def test_grad_check_quadratic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    assert grad_check(lambda t: (t * t).sum(), x, 1e-5) < 1e-8


def test_grad_check_detached_constant():
    c = Tensor(np.arange(6.0).reshape(2, 3))

    def loss(t):
        return (c * c).sum() + (t.detach() * 0.0).sum()

    x = np.ones((2, 3))
    t = Tensor(x, requires_grad=True)
    loss(t).backward()
    assert t.grad is None  # nothing reached the input
    assert grad_check(loss, x, 1e-5) < 1e-6


def test_detached_gradient_is_exactly_zero():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (x * 3.0).sum() + (x.detach() * 5.0).sum()
    y.backward()
    assert np.array_equal(x.grad, np.array([3.0, 3.0]))


def test_grad_check_rejects_bad_step_and_nonfinite():
    with pytest.raises(NumericsError):
        grad_check(lambda t: t.sum(), np.ones(2), 1.0)
    with pytest.raises(NumericsError, match="loss not evaluable"), np.errstate(invalid="ignore"):
        grad_check(lambda t: t.log().sum(), -np.ones(2), 1e-5)


@pytest.mark.parametrize("op", [
    lambda t: (t.exp() * t).sum(),
    lambda t: t.softmax(axis=-1)[..., 0].sum(),
    lambda t: t.log_softmax(axis=0).sum() * 0.3 + (t @ t.T).sum(),
    lambda t: layer_norm(t).gelu().sum(),
    lambda t: (l2_normalize(t) ** 3).sum(),
    lambda t: concat([t, t * 2.0], axis=0).mean(),
    lambda t: (t[1:, ::2] * t[:-1, 1::2]).sum(),
    lambda t: (t.reshape(-1) / (t.abs() + 1.0).reshape(-1)).sum(),
    lambda t: t.expand((2,) + t.shape).swapaxes(0, 1).sum(axis=1).sqrt().sum(),
])
def test_primitive_gradients(op):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.5, 1.5, size=(3, 4))
    assert grad_check(op, x, 1e-5) < 1e-7


def test_straight_through_passes_soft_gradient():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))

    x1 = Tensor(logits, requires_grad=True)
    soft = x1.softmax(axis=0)
    hard = (soft.data == soft.data.max(axis=0)).astype(float)
    out = straight_through(hard, soft)
    assert np.array_equal(out.data, hard)
    (out * w).sum().backward()

    x2 = Tensor(logits, requires_grad=True)
    (x2.softmax(axis=0) * w).sum().backward()
    assert np.array_equal(x1.grad, x2.grad)


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 4))

    def f():
        t = Tensor(x, requires_grad=True)
        y = (layer_norm(t @ t.T).softmax(-1) * t).sum()
        y.backward()
        return y.data.copy(), t.grad.copy()

    a, b = f(), f()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
