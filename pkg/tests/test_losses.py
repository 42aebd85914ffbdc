import math

import numpy as np
import pytest

from protoseg.losses import it_contrastive, total_loss
from protoseg.numerics import NumericsError, Tensor, grad_check


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_orthonormal_pair():
    z = np.eye(2)
    out = float(it_contrastive(z, z, tau=1.0).data)
    assert out == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert out == pytest.approx(0.313262, abs=1e-6)


def test_identical_rows_give_log_n():
    for n in (2, 3, 7):
        z = np.tile(unit_rows(np.array([[1.0, 2.0, 3.0]])), (n, 1))
        assert float(it_contrastive(z, z, 0.1).data) == pytest.approx(math.log(n), abs=1e-12)
    assert float(it_contrastive(np.tile([[1.0, 0.0]], (2, 1)), np.tile([[1.0, 0.0]], (2, 1))).data) == \
        pytest.approx(0.693147, abs=1e-6)


def test_batch_permutation_invariance():
    rng = np.random.default_rng(0)
    zi, zt = unit_rows(rng.normal(size=(6, 5))), unit_rows(rng.normal(size=(6, 5)))
    perm = rng.permutation(6)
    a = float(it_contrastive(zi, zt).data)
    b = float(it_contrastive(zi[perm], zt[perm]).data)
    assert a == pytest.approx(b, abs=1e-14)


def test_batch_too_small():
    with pytest.raises(NumericsError, match="batch too small"):
        it_contrastive(np.ones((1, 3)), np.ones((1, 3)))


def test_it_contrastive_gradient():
    rng = np.random.default_rng(1)
    zt = unit_rows(rng.normal(size=(4, 6)))
    for _ in range(10):
        x0 = rng.normal(size=(4, 6))
        err = grad_check(lambda x: it_contrastive(x / (x * x).sum(axis=-1, keepdims=True).sqrt(), zt), x0)
        assert err < 1e-4


def test_total_loss_arithmetic():
    assert float(total_loss(1.5, [2.0], [3.0], 0.0, 0.0).data) == 1.5
    assert float(total_loss(1.0, [2.0], [], 0.1, 0.0).data) == pytest.approx(1.2, abs=1e-15)
    it, pg_i, pg_t = 0.7, [np.array([1.0, 2.0]), np.array([0.5])], [np.array([4.0, 1.0]), np.array([2.0])]
    expected = 0.7 + 0.1 * (3.0 + 0.5) + 0.01 * (5.0 + 2.0)
    assert float(total_loss(it, pg_i, pg_t, 0.1, 0.01).data) == pytest.approx(expected, abs=1e-14)


def test_total_loss_is_linear_in_pg_terms():
    base = float(total_loss(1.0, [2.0, 3.0], [4.0], 0.1, 0.01).data)
    scaled = float(total_loss(1.0, [2.0 * 3, 3.0], [4.0], 0.1, 0.01).data)
    assert scaled - base == pytest.approx(0.1 * 2.0 * 2, abs=1e-14)


def test_total_loss_gradient_reaches_terms():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    total_loss(Tensor(0.5), [t], [t], 0.1, 0.01).backward()
    np.testing.assert_allclose(t.grad, [0.11, 0.11], atol=1e-15)
