import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseg.numerics import NumericsError, Tensor
from protoseg.sgm import GroupingParams, group_block, gumbel_softmax_st, sample_gumbel


def identity_params(d, temperature=1.0):
    eye = np.eye(d)
    return GroupingParams(Tensor(eye), Tensor(eye), Tensor(eye), temperature)


def test_perturbed_argmax_example():
    a = gumbel_softmax_st(np.array([[2.0], [-1.0]]), noise=np.array([[0.1], [0.05]]), hard=True)
    assert a.mode == "hard"
    assert np.array_equal(a.values.data, [[1.0], [0.0]])


def test_fair_coin_frequency():
    a = gumbel_softmax_st(np.zeros((2, 10_000)), temperature=1.0, seed=123, hard=True)
    freq = a.values.data[0].mean()
    assert 0.48 <= freq <= 0.52


def test_noise_is_reproducible_and_keyed():
    a = sample_gumbel((3, 4), seed=5, step=2, level=1)
    assert np.array_equal(a, sample_gumbel((3, 4), seed=5, step=2, level=1))
    assert not np.array_equal(a, sample_gumbel((3, 4), seed=5, step=3, level=1))
    assert not np.array_equal(a, sample_gumbel((3, 4), seed=5, step=2, level=2))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_hard_columns_are_one_hot(q, m, seed, temperature):
    logits = np.random.default_rng(seed).normal(scale=3.0, size=(q, m))
    a = gumbel_softmax_st(logits, temperature, seed=seed, hard=True).values.data
    assert set(np.unique(a)) <= {0.0, 1.0}
    assert np.array_equal(a.sum(axis=0), np.ones(m))


def test_soft_columns_sum_to_one():
    logits = np.random.default_rng(0).normal(size=(4, 7))
    a = gumbel_softmax_st(logits, 0.7, seed=1, hard=False)
    assert a.mode == "soft"
    np.testing.assert_allclose(a.values.data.sum(axis=0), 1.0, atol=1e-12)


def test_straight_through_gradient_equals_soft_gradient():
    rng = np.random.default_rng(4)
    for _ in range(20):
        logits = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 6))
        x_h = Tensor(logits, requires_grad=True)
        (gumbel_softmax_st(x_h, 0.5, seed=9, hard=True).values * w).sum().backward()
        x_s = Tensor(logits, requires_grad=True)
        (gumbel_softmax_st(x_s, 0.5, seed=9, hard=False).values * w).sum().backward()
        assert np.array_equal(x_h.grad, x_s.grad)


def test_nonfinite_logits_rejected():
    with pytest.raises(NumericsError):
        gumbel_softmax_st(np.array([[np.inf], [0.0]]))


def test_group_block_hand_case():
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.5]])
    # logits G S^T = [[2, 0, 1], [0, 1, 1.5]] -> patches 0 | 1, 2
    s_hat, a = group_block(Tensor(s), Tensor(g), identity_params(2), noise=np.zeros((2, 3)))
    np.testing.assert_array_equal(a.values.data, [[1, 0, 0], [0, 1, 1]])
    np.testing.assert_allclose(s_hat.data, [[3.0, 0.0], [1.0, 3.5]], atol=1e-15)


def test_group_block_all_to_one_group():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(5, 3))
    g = rng.normal(size=(3, 3))
    noise = np.zeros((3, 5))
    noise[0] = 1e6
    params = GroupingParams(Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(3, 3))),
                            Tensor(rng.normal(size=(3, 3))))
    s_hat, a = group_block(Tensor(s), Tensor(g), params, noise=noise)
    v = s @ params.w_v.data
    np.testing.assert_allclose(s_hat.data[0], g[0] + v.sum(axis=0), atol=1e-12)
    np.testing.assert_array_equal(s_hat.data[1:], g[1:])


def test_group_block_matches_definition_with_one_hot_columns():
    rng = np.random.default_rng(8)
    s, g = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    params = GroupingParams(*(Tensor(rng.normal(size=(4, 4))) for _ in range(3)))
    s_hat, a = group_block(Tensor(s), Tensor(g), params, seed=3)
    v = s @ params.w_v.data
    owner = a.values.data.argmax(axis=0)
    for i in range(3):
        np.testing.assert_allclose(s_hat.data[i], g[i] + v[owner == i].sum(axis=0), atol=1e-12)


def test_soft_converges_to_hard_at_low_temperature():
    rng = np.random.default_rng(11)
    for _ in range(10):
        s, g = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
        w = [Tensor(rng.normal(size=(4, 4))) for _ in range(3)]
        hard, _ = group_block(Tensor(s), Tensor(g), GroupingParams(*w, 1e-4), seed=2, hard=True)
        soft, _ = group_block(Tensor(s), Tensor(g), GroupingParams(*w, 1e-4), seed=2, hard=False)
        np.testing.assert_allclose(soft.data, hard.data, atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(NumericsError, match="dimension mismatch"):
        group_block(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))), identity_params(3))
    with pytest.raises(NumericsError):
        GroupingParams(Tensor(np.eye(2)), Tensor(np.eye(3)), Tensor(np.eye(2)))
