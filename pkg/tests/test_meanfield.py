import math

import numpy as np
import pytest

from weakseg.data import DatasetConfig, generate_dataset, miou
from weakseg.distributions import InvalidInputError, softmax_grid
from weakseg.kernels import FeatureImage, KernelParams, kernel_matrix, kernel_value
from weakseg.meanfield import (
    PairwiseCrf,
    PotentialForm,
    crf_energies,
    exact_crf_distribution,
    exact_marginals,
    factorized_kl,
    fixed_point_residual,
    meanfield_fixed_point,
    meanfield_step,
    potential_equivalence_check,
    refine_with_meanfield,
    stationarity_gap,
    uniform_grid,
)

SMALL = KernelParams(w1=1.0, w2=0.5, theta_alpha=40.0, theta_beta=2.0, theta_gamma=1.0)


def _feat(rng, h, w):
    return FeatureImage(rng.uniform(0, 255, (h, w, 3)))


def test_no_potentials_gives_uniform(rng):
    params = KernelParams(w1=0.0, w2=0.0)
    crf = PairwiseCrf(np.zeros((3, 3, 4)), params, _feat(rng, 3, 3))
    q = rng.dirichlet(np.ones(4), (3, 3))
    np.testing.assert_allclose(meanfield_step(crf, q), 0.25, atol=1e-15)
    q, it, res = meanfield_fixed_point(crf, q, damping=0.0)
    assert it == 2 and res == 0.0  # first step lands on uniform, second confirms


def test_two_pixel_hand_computed():
    feat = FeatureImage(np.array([[[10.0, 10, 10], [30, 20, 10]]]))
    k = kernel_value(SMALL, feat, 0, 1)
    unary = np.array([[[0.2, 1.0], [0.7, -0.3]]])
    q = np.array([[[0.6, 0.4], [0.1, 0.9]]])
    for form in (PotentialForm.AGREE, PotentialForm.POTTS):
        out = meanfield_step(PairwiseCrf(unary, SMALL, feat, form), q)
        # agreement: q0(z) ∝ exp(-u0(z) + k q1(z)); Potts adds the constant -k
        a = [math.exp(-unary[0, 0, z] + k * q[0, 1, z]) for z in range(2)]
        b = [math.exp(-unary[0, 1, z] + k * q[0, 0, z]) for z in range(2)]
        np.testing.assert_allclose(out[0, 0], np.array(a) / sum(a), atol=1e-15)
        np.testing.assert_allclose(out[0, 1], np.array(b) / sum(b), atol=1e-15)


@pytest.mark.parametrize("form", ["potts", "agree"])
def test_step_matches_double_loop(rng, form):
    feat = _feat(rng, 6, 6)
    unary = rng.normal(size=(6, 6, 3))
    q = rng.dirichlet(np.ones(3), (6, 6))
    kmat = kernel_matrix(SMALL, feat)
    qf, uf = q.reshape(36, 3), unary.reshape(36, 3)
    expect = np.empty((36, 3))
    for i in range(36):
        for z in range(3):
            e = 0.0
            for j in range(36):
                if j != i:
                    e += kmat[i, j] * ((1 - qf[j, z]) if form == "potts" else -qf[j, z])
            expect[i, z] = -uf[i, z] - e
    expect = np.exp(expect - expect.max(1, keepdims=True))
    expect /= expect.sum(1, keepdims=True)
    out = meanfield_step(PairwiseCrf(unary, SMALL, feat, form), q)
    np.testing.assert_allclose(out.reshape(36, 3), expect, atol=1e-10)


def test_two_region_prior_fixed_point():
    img = np.zeros((8, 8, 3))
    img[:, 4:] = 200.0
    feat = FeatureImage(img)
    crf = PairwiseCrf.prior(KernelParams(w1=0.3, w2=0.1, theta_alpha=20, theta_beta=3, theta_gamma=1), feat, 2)
    init = np.random.default_rng(5).dirichlet(np.ones(2), (8, 8))
    q, _, _ = meanfield_fixed_point(crf, init, max_iters=5000, tol=1e-13)
    # substitute into q_i(l) = exp(sum_j k_ij q_j(l)) / Z_i
    kq = (kernel_matrix(crf.params, feat) @ q.reshape(64, 2)).reshape(8, 8, 2)
    assert np.max(np.abs(q - softmax_grid(kq))) < 1e-8
    assert fixed_point_residual(crf, q) < 1e-8


def test_fixed_point_is_kl_better_than_random_factorizations(rng):
    feat = _feat(rng, 2, 2)
    crf = PairwiseCrf.prior(SMALL, feat, 2)
    table = exact_crf_distribution(crf)
    best = min(
        (meanfield_fixed_point(crf, rng.dirichlet(np.ones(2), (2, 2)), 5000, 1e-13)[0] for _ in range(8)),
        key=lambda q: factorized_kl(q, table),
    )
    kl_mf = factorized_kl(best, table)
    kl_random = min(factorized_kl(rng.dirichlet(np.ones(2), (2, 2)), table) for _ in range(1000))
    assert kl_mf <= kl_random
    assert stationarity_gap(crf, best).max() < 1e-6


def test_enumeration_single_pixel_is_softmax(rng):
    unary = rng.normal(size=(1, 1, 3))
    crf = PairwiseCrf(unary, SMALL, _feat(rng, 1, 1))
    np.testing.assert_allclose(exact_crf_distribution(crf), softmax_grid(-unary).ravel(), atol=1e-15)


def test_enumeration_zero_potentials_uniform(rng):
    crf = PairwiseCrf(np.zeros((2, 2, 2)), KernelParams(w1=0, w2=0), _feat(rng, 2, 2))
    np.testing.assert_allclose(exact_crf_distribution(crf), 1 / 16, atol=1e-15)


def test_enumeration_energy_by_hand(rng):
    feat = _feat(rng, 1, 3)
    unary = rng.normal(size=(1, 3, 2))
    crf = PairwiseCrf(unary, SMALL, feat, "potts")
    k = kernel_matrix(SMALL, feat)
    z = (1, 0, 1)  # index 1 + 0*2 + 1*4 = 5
    e = sum(unary[0, i, z[i]] for i in range(3)) + k[0, 1] + k[1, 2]
    assert crf_energies(crf)[5] == pytest.approx(e, abs=1e-14)


def test_enumeration_marginals_agree_with_meanfield_argmax():
    rng = np.random.default_rng(11)
    hits = total = 0
    for _ in range(20):
        feat = _feat(rng, 2, 3)
        crf = PairwiseCrf(rng.normal(0, 1.5, (2, 3, 3)), SMALL, feat)
        q, _, _ = meanfield_fixed_point(crf, max_iters=2000, tol=1e-12)
        m = exact_marginals(crf)
        hits += int(np.sum(q.argmax(-1) == m.argmax(-1)))
        total += 6
    assert hits / total >= 0.9


def test_enumeration_guards(rng):
    with pytest.raises(InvalidInputError):
        exact_crf_distribution(PairwiseCrf(np.zeros((5, 5, 2)), SMALL, _feat(rng, 5, 5)))
    with pytest.raises(InvalidInputError):
        exact_crf_distribution(PairwiseCrf(np.zeros((2, 2, 2)), SMALL, _feat(rng, 2, 2), normalized=True))


def test_fixed_point_returns_residual_when_not_converged(rng):
    crf = PairwiseCrf.prior(KernelParams(), _feat(rng, 4, 4), 3)
    q, it, res = meanfield_fixed_point(crf, rng.dirichlet(np.ones(3), (4, 4)), max_iters=2, tol=0.0)
    assert it == 2 and res > 0


def test_equivalence_uniform_q(rng):
    rep = potential_equivalence_check(KernelParams(), _feat(rng, 5, 5), uniform_grid((5, 5, 3)))
    np.testing.assert_allclose(rep.potts, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(rep.agree, 1 / 3, atol=1e-15)


@pytest.mark.parametrize("normalized", [True, False])
def test_equivalence_random(rng, normalized):
    q = rng.dirichlet(np.ones(4), (7, 7))
    rep = potential_equivalence_check(KernelParams(), _feat(rng, 7, 7), q, unary=rng.normal(size=(7, 7, 4)), normalized=normalized)
    assert rep.max_diff < 1e-10


def test_refine_zero_iterations_is_softmax(rng):
    logits = rng.normal(size=(6, 6, 3))
    np.testing.assert_array_equal(refine_with_meanfield(logits, KernelParams(), _feat(rng, 6, 6), 0), softmax_grid(logits))


def test_refine_improves_noisy_predictions():
    cfg = DatasetConfig(size=32)
    scenes = generate_dataset(20, 3, cfg)
    rng = np.random.default_rng(0)
    better = 0
    for s in scenes:
        onehot = np.eye(cfg.num_classes)[s.gt_mask]
        logits = 1.5 * onehot + rng.normal(0, 1.0, onehot.shape)
        raw = miou(np.argmax(logits, -1), s.gt_mask, cfg.num_classes)[1]
        q = refine_with_meanfield(logits, KernelParams(), s.feature_image(), 10, "fast")
        better += miou(np.argmax(q, -1), s.gt_mask, cfg.num_classes)[1] > raw
    assert better / len(scenes) >= 0.7
