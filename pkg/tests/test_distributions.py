import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakseg.distributions import (
    InvalidInputError,
    LabelSet,
    entropy,
    floor_distribution,
    kl_divergence,
    kl_per_pixel,
    log_softmax_grid,
    softmax_grid,
)


def test_softmax_zero_logits_uniform():
    np.testing.assert_allclose(softmax_grid(np.zeros((2, 3, 3))), 1 / 3, rtol=0, atol=1e-15)


def test_softmax_ln2():
    p = softmax_grid(np.broadcast_to([math.log(2), 0.0], (2, 2, 2)))
    np.testing.assert_allclose(p[..., 0], 2 / 3, atol=1e-15)
    np.testing.assert_allclose(p[..., 1], 1 / 3, atol=1e-15)


def test_softmax_matches_naive_oracle(rng):
    logits = rng.normal(size=(4, 4, 3))
    e = np.exp(logits)
    np.testing.assert_allclose(softmax_grid(logits), e / e.sum(-1, keepdims=True), rtol=0, atol=1e-12)


def test_softmax_large_logits_stable():
    p = softmax_grid(np.array([[[1000.0, 0.0, -1000.0]]]))
    assert np.all(np.isfinite(p))
    assert p[0, 0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    logits = np.zeros((2, 2, 2))
    logits[1, 1, 0] = bad
    with pytest.raises(InvalidInputError):
        softmax_grid(logits)


def test_softmax_rejects_wrong_rank():
    with pytest.raises(InvalidInputError):
        softmax_grid(np.zeros((4, 3)))


def test_log_softmax_consistent(rng):
    logits = rng.normal(0, 5, (3, 5, 4))
    np.testing.assert_allclose(np.exp(log_softmax_grid(logits)), softmax_grid(logits), atol=1e-14)


def test_kl_identity_is_zero(rng):
    p = rng.dirichlet(np.ones(3), (4, 4))
    assert kl_divergence(p, p) == 0.0


def test_kl_analytic_ln2():
    p = np.array([[[1.0, 0.0]]])
    q = np.array([[[0.5, 0.5]]])
    assert kl_divergence(p, q) == pytest.approx(math.log(2), abs=1e-10)


def test_kl_matches_term_by_term_oracle(rng):
    p = rng.dirichlet(np.ones(4), (5, 3))
    q = rng.dirichlet(np.ones(4), (5, 3))
    total = 0.0
    for i in range(5):
        for j in range(3):
            for k in range(4):
                total += p[i, j, k] * math.log(p[i, j, k] / q[i, j, k])
    assert kl_divergence(p, q) == pytest.approx(total, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(InvalidInputError):
        kl_per_pixel(np.full((2, 2, 2), 0.5), np.full((2, 3, 2), 0.5))


def test_entropy_values():
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    assert entropy([1.0, 0.0]) == 0.0
    assert entropy([0.4, 0.6]) == pytest.approx(0.67301166700925, abs=1e-12)


def test_entropy_rejects_negative():
    with pytest.raises(InvalidInputError):
        entropy([1.2, -0.2])


def test_labelset_adds_background_and_sorts():
    ls = LabelSet(4, (3, 1))
    assert ls.present == (0, 1, 3)
    assert ls.foreground == (1, 3)
    assert ls.mask().tolist() == [True, True, False, True]


def test_labelset_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        LabelSet(3, (3,))


grids = arrays(np.float64, (3, 3, 4), elements=st.floats(-30, 30, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(grids)
def test_softmax_on_simplex(logits):
    p = softmax_grid(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(grids, grids)
def test_kl_nonnegative(a, b):
    assert kl_divergence(softmax_grid(a), softmax_grid(b)) >= -1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 2, 3), elements=st.floats(0, 1)))
def test_floor_distribution_on_simplex(p):
    q = floor_distribution(p + 1e-300)
    assert np.all(q > 0)
    np.testing.assert_allclose(q.sum(-1), 1.0, atol=1e-12)
