import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoseg.metrics import compactness, dim_variance, miou


def test_perfect_prediction():
    gt = np.array([0, 1, 1, 2, 0, 2])
    out = miou(gt, gt, 3)
    assert out.miou == 1.0
    assert np.isnan(out.iou[3])  # absent from both, excluded


def test_disjoint_masks():
    gt = np.array([1, 1, 0, 0])
    pred = np.array([0, 0, 1, 1])
    assert miou(pred, gt, 1).iou[1] == 0.0


def test_half_coverage():
    gt = np.array([1, 1, 1, 1, 0, 0])
    pred = np.array([1, 1, 0, 0, 0, 0])
    out = miou(pred, gt, 1)
    assert out.iou[1] == pytest.approx(0.5)
    assert out.iou[0] == pytest.approx(2 / 4)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        miou([0, 3], [0, 1], 2)
    with pytest.raises(ValueError):
        miou([0, -1], [0, 1], 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_miou_invariant_to_relabeling(k, m, seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, k + 1, size=m), rng.integers(0, k + 1, size=m)
    perm = rng.permutation(k + 1)
    assert miou(perm[pred], perm[gt], k).miou == pytest.approx(miou(pred, gt, k).miou, abs=1e-12)


def one_hot(owner, q):
    a = np.zeros((q, len(owner)))
    a[owner, np.arange(len(owner))] = 1.0
    return a


def test_compactness_examples():
    g = np.array([[1.0, 0.0], [0.0, 2.0]])
    owner = np.array([0, 1, 0])
    assert compactness(g[owner] * 3.0, one_hot(owner, 2), g) == pytest.approx(0.0, abs=1e-15)
    ortho = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -4.0]])
    assert compactness(ortho, one_hot(owner, 2), g) == pytest.approx(1.0, abs=1e-15)
    tokens = np.array([[1.0, 1.0], [0.0, 1.0], [-1.0, 0.0]])
    expected = ((1 - 1 / np.sqrt(2)) + 0.0 + 2.0) / 3
    assert compactness(tokens, one_hot(owner, 2), g) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_compactness_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    s, g = rng.normal(size=(7, 3)), rng.normal(size=(3, 3))
    a = one_hot(rng.integers(0, 3, size=7), 3)
    scale = rng.uniform(0.1, 10, size=(7, 1))
    assert compactness(s * scale, a, g) == pytest.approx(compactness(s, a, g), abs=1e-12)


def test_dim_variance():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(1, 4, 5))
    mean, var = dim_variance(np.repeat(g, 3, axis=0))
    np.testing.assert_allclose(var, 0.0, atol=1e-15)
    assert mean.shape == (5,) and var.shape == (5,)
    mean, var = dim_variance(np.array([[0.0, 2.0, 1.0], [1.0, 2.0, 1.0]]))
    np.testing.assert_allclose(var, [0.25, 0.0, 0.0])
    np.testing.assert_allclose(mean, [0.5, 2.0, 1.0])
    with pytest.raises(ValueError):
        dim_variance(np.ones((1, 3)))
