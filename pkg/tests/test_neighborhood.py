import numpy as np
import pytest

from weakseg.distributions import InvalidInputError, softmax_grid
from weakseg.kernels import FeatureImage, KernelParams, kernel_matrix
from weakseg.neighborhood import (
    NeighborhoodMode,
    exponentiated_weighted_mean,
    neighborhood_distribution,
    neighborhood_loss_and_grad,
    weighted_mean,
)
from weakseg.verify import central_difference


def _feat(rng, h=8, w=8):
    return FeatureImage(rng.uniform(0, 255, (h, w, 3)))


def test_weighted_mean_constant_fixed_point(rng):
    p = np.broadcast_to([0.2, 0.3, 0.5], (6, 6, 3)).copy()
    np.testing.assert_allclose(weighted_mean(KernelParams(), _feat(rng, 6, 6), p), p, atol=1e-15)


def test_weighted_mean_two_pixels():
    feat = FeatureImage(np.array([[[10.0, 20, 30], [200, 10, 50]]]))
    p = np.array([[[0.9, 0.1], [0.3, 0.7]]])
    out = weighted_mean(KernelParams(), feat, p)
    np.testing.assert_allclose(out[0, 0], p[0, 1], atol=1e-15)
    np.testing.assert_allclose(out[0, 1], p[0, 0], atol=1e-15)


def test_weighted_mean_matches_dense_kernel(rng):
    params = KernelParams()
    feat = _feat(rng)
    p = rng.dirichlet(np.ones(3), (8, 8))
    k = kernel_matrix(params, feat)
    ref = (k @ p.reshape(-1, 3)) / k.sum(1, keepdims=True)
    np.testing.assert_allclose(weighted_mean(params, feat, p).reshape(-1, 3), ref, atol=1e-10)


def test_exponentiated_uniform_stays_uniform(rng):
    p = np.full((5, 5, 4), 0.25)
    np.testing.assert_allclose(exponentiated_weighted_mean(KernelParams(), _feat(rng, 5, 5), p), 0.25, atol=1e-14)


@pytest.mark.parametrize("normalization", ["unit", "total_weight"])
def test_exponentiated_is_softmax_of_scaled_mean(rng, normalization):
    params = KernelParams(normalization=normalization)
    feat = _feat(rng)
    p = rng.dirichlet(np.ones(3), (8, 8))
    m = weighted_mean(params, feat, p)
    expect = softmax_grid(params.exp_scale * m)
    np.testing.assert_allclose(exponentiated_weighted_mean(params, feat, p), expect, atol=1e-12)


def test_exponentiated_sharper_than_weighted(rng):
    # with the default total-weight scale the exponentiated target is sharper
    params = KernelParams()
    feat = _feat(rng)
    p = rng.dirichlet(np.ones(3), (8, 8))
    e = exponentiated_weighted_mean(params, feat, p).max(-1)
    w = weighted_mean(params, feat, p).max(-1)
    assert np.mean(e >= w) >= 0.95


def test_mode_parse():
    assert NeighborhoodMode.parse("Weighted") is NeighborhoodMode.WEIGHTED
    with pytest.raises(InvalidInputError):
        NeighborhoodMode.parse("median")


def test_constant_p_zero_loss_weighted(rng):
    logits = np.broadcast_to([0.3, -1.0, 2.0], (6, 6, 3)).copy()
    loss, grad, _ = neighborhood_loss_and_grad("weighted", KernelParams(), _feat(rng, 6, 6), logits)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


@pytest.mark.parametrize("mode", ["weighted", "exponentiated"])
@pytest.mark.parametrize("stop_gradient", [True, False])
def test_gradient_finite_difference_2x2(rng, mode, stop_gradient):
    params = KernelParams(w1=2, w2=1, theta_alpha=60, theta_beta=2, theta_gamma=1)
    feat = _feat(rng, 2, 2)
    logits = rng.normal(size=(2, 2, 2))
    _, grad, target = neighborhood_loss_and_grad(mode, params, feat, logits, stop_gradient=stop_gradient)
    if stop_gradient:
        from weakseg.distributions import kl_divergence

        fn = lambda x: kl_divergence(softmax_grid(x), target)  # noqa: E731
    else:
        fn = lambda x: neighborhood_loss_and_grad(mode, params, feat, x, stop_gradient=False)[0]  # noqa: E731
    np.testing.assert_allclose(grad, central_difference(fn, logits, 1e-5), atol=1e-6)


@pytest.mark.parametrize("mode", ["weighted", "exponentiated"])
def test_full_gradient_through_fast_filter(rng, mode):
    # the fast filter is linear, so the adjoint makes the full gradient exact for it too
    params = KernelParams()
    feat = _feat(rng, 5, 6)
    logits = rng.normal(size=(5, 6, 3))
    _, grad, _ = neighborhood_loss_and_grad(mode, params, feat, logits, "fast", stop_gradient=False)
    fn = lambda x: neighborhood_loss_and_grad(mode, params, feat, x, "fast", stop_gradient=False)[0]  # noqa: E731
    np.testing.assert_allclose(grad, central_difference(fn, logits, 1e-5), atol=1e-6)


def test_single_pixel_rejected():
    feat = FeatureImage(np.zeros((1, 1, 3)))
    with pytest.raises(InvalidInputError):
        neighborhood_loss_and_grad("weighted", KernelParams(), feat, np.zeros((1, 1, 2)))


def test_isolated_pixel_zero_normalizer():
    params = KernelParams(w1=1.0, w2=0.0, theta_alpha=1.0, theta_beta=0.01, theta_gamma=1.0)
    feat = FeatureImage(np.array([[[0.0, 0, 0], [255, 255, 255]]]))
    with pytest.raises(InvalidInputError):
        weighted_mean(params, feat, np.full((1, 2, 2), 0.5))


def test_distribution_dispatch(rng):
    feat = _feat(rng, 4, 4)
    p = rng.dirichlet(np.ones(2), (4, 4))
    np.testing.assert_array_equal(neighborhood_distribution("weighted", KernelParams(), feat, p), weighted_mean(KernelParams(), feat, p))
