"""
Tests for label refinement: confusion matrices, refined labels and the WLI bound
"""
import numpy as np
import pytest
from scipy.stats import kstest, norm

from concept_mixture import CovariateLaw, GatingKind, GatingParams, gate_weights
from errors import ValidationError
from label_refinement import (QuadratureConfig, RefinementMode, calibrate_wli_constant, confusion_riemann,
                              refine_labels, refinement_posterior, refinement_posterior_batch, wli_bound)


@pytest.fixture
def separated_system(make_system):
    return make_system(strong=[[1.0], [-1.0]], weak_p=[[10.0], [-10.0]], weak_q=[[10.0], [-10.0]],
                       pi_p=[0.5, 0.5], pi_q=[0.0, 1.0], noise_sd=0.1)


@pytest.fixture
def bhattacharyya_system(make_system):
    # equal priors, identical weak experts in both domains, Delta = 5 x
    return make_system(strong=[[1.0], [-1.0]], weak_p=[[0.0], [5.0]], weak_q=[[0.0], [5.0]],
                       pi_p=[0.5, 0.5], pi_q=[0.5, 0.5], noise_sd=1.0)


class TestModes:

    def test_icl_needs_demonstrations(self):
        with pytest.raises(ValidationError):
            RefinementMode.icl(0)
        assert str(RefinementMode.icl(4)) == "icl(M=4)"

    def test_quadrature_config_validation(self):
        with pytest.raises(ValidationError):
            QuadratureConfig(method="simpson")
        with pytest.raises(ValidationError):
            QuadratureConfig(mc_draws=1)

    def test_noiseless_source_weak_expert_rejected(self, make_system):
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[1.0], [-1.0]], weak_q=[[1.0], [-1.0]],
                             pi_p=[0.5, 0.5], pi_q=[0.5, 0.5], weak_noise_sd=0.0)
        with pytest.raises(ValidationError):
            refinement_posterior(system, np.array([1.0]))


class TestSingleLabelPosterior:

    def test_uninformative_weak_experts(self, make_system):
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[1.0], [1.0]], weak_q=[[1.7], [-1.3]],
                             pi_p=[0.6, 0.4], pi_q=[0.1, 0.9])
        post = refinement_posterior(system, np.array([1.3]))
        np.testing.assert_allclose(post.confusion, np.tile([0.6, 0.4], (2, 1)), atol=1e-9)
        np.testing.assert_allclose(post.q_hat, [0.6, 0.4], atol=1e-9)

    def test_perfect_discrimination(self, separated_system):
        post = refinement_posterior(separated_system, np.array([1.0]))
        np.testing.assert_allclose(post.confusion, np.eye(2), atol=1e-9)
        np.testing.assert_allclose(post.q_hat, [0.0, 1.0], atol=1e-9)

    def test_matches_riemann_oracle(self, make_system):
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[0.0], [2.0]], weak_q=[[2.0], [2.0]],
                             pi_p=[0.5, 0.5], pi_q=[0.5, 0.5], noise_sd=1.0)
        post = refinement_posterior(system, np.array([1.0]))
        np.testing.assert_allclose(post.confusion, confusion_riemann(system, np.array([1.0])), atol=1e-6)

    def test_matches_riemann_oracle_on_random_instances(self, make_system):
        rng = np.random.default_rng(17)
        for _ in range(20):
            pi_p = rng.dirichlet([2.0, 2.0])
            system = make_system(strong=[[1.0], [-1.0]], weak_p=rng.uniform(-2, 2, (2, 1)),
                                 weak_q=rng.uniform(-2, 2, (2, 1)), pi_p=pi_p, pi_q=rng.dirichlet([2.0, 2.0]),
                                 noise_sd=rng.uniform(0.5, 1.5))
            x = np.array([rng.uniform(-2, 2)])
            np.testing.assert_allclose(refinement_posterior(system, x).confusion, confusion_riemann(system, x),
                                       atol=1e-6)

    def test_rows_sum_to_one(self, gaussian_system):
        for x in ([0.0, 0.0], [1.5, -0.5], [-2.0, 1.0]):
            post = refinement_posterior(gaussian_system, np.array(x))
            np.testing.assert_allclose(post.confusion.sum(axis=1), 1.0, atol=1e-8)
            assert post.q_hat.sum() == pytest.approx(1.0, abs=1e-8)
            assert post.seed is None

    def test_gauss_hermite_batch_agrees_with_adaptive(self, canonical_system):
        xs = np.linspace(-0.5, 0.5, 5)
        q_batch, conf_batch = refinement_posterior_batch(canonical_system, xs)
        assert q_batch.shape == (5, 2) and conf_batch.shape == (5, 2, 2)
        for i, x in enumerate(xs):
            post = refinement_posterior(canonical_system, np.array([x]))
            np.testing.assert_allclose(conf_batch[i], post.confusion, atol=1e-6)
            np.testing.assert_allclose(q_batch[i], post.q_hat, atol=1e-6)

    def test_canonical_refinement_differs_from_target_prior(self, canonical_system):
        grid = np.linspace(-2, 2, 41)
        q_hat, _ = refinement_posterior_batch(canonical_system, grid)
        gap = np.abs(q_hat - canonical_system.pi_q).max(axis=1)
        assert gap.max() > 0.05
        # x = 0 carries no label information, so the source prior comes back
        np.testing.assert_allclose(q_hat[20], canonical_system.pi_p, atol=1e-9)
        assert gap[-1] < 1e-6


class TestInContextPosterior:

    def test_perfect_discrimination(self, separated_system):
        quad = QuadratureConfig(mc_draws=500, seed=3)
        post = refinement_posterior(separated_system, np.array([0.7]), RefinementMode.icl(5), quad)
        assert post.q_hat[1] > 0.999
        assert post.stderr.shape == (2, 2)
        assert post.seed == 3

    def test_more_demonstrations_sharpen_confusion(self, canonical_system):
        quad = QuadratureConfig(mc_draws=1000, seed=4)
        x = np.array([0.5])
        one = refinement_posterior(canonical_system, x, RefinementMode.icl(1), quad)
        many = refinement_posterior(canonical_system, x, RefinementMode.icl(20), quad)
        assert np.all(np.diag(many.confusion) > np.diag(one.confusion))
        assert np.diag(many.confusion).min() > 0.99
        np.testing.assert_allclose(many.q_hat, canonical_system.pi_q, atol=0.01)

    def test_demonstration_covariates_identify_concept(self, make_system):
        # identical weak experts carry no label signal, only where x lands does
        gating = GatingParams(eta=[[-3.0], [3.0]], kind=GatingKind.GAUSSIAN, variance=1.0)
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[1.0], [1.0]], weak_q=[[1.0], [1.0]],
                             pi_p=[0.5, 0.5], pi_q=[0.5, 0.5], gating=gating, x_law=CovariateLaw.standard(1))
        x = np.array([0.0])
        single = refinement_posterior(system, x)
        np.testing.assert_allclose(single.confusion, np.full((2, 2), 0.5), atol=1e-9)
        icl = refinement_posterior(system, x, RefinementMode.icl(20), QuadratureConfig(mc_draws=500, seed=6))
        assert np.diag(icl.confusion).min() > 0.99
        np.testing.assert_allclose(icl.confusion.sum(axis=1), 1.0, atol=1e-12)

    def test_seeded_draws_repeat(self, canonical_system):
        quad = QuadratureConfig(mc_draws=200, seed=9)
        a = refinement_posterior(canonical_system, np.array([1.0]), RefinementMode.icl(3), quad)
        b = refinement_posterior(canonical_system, np.array([1.0]), RefinementMode.icl(3), quad)
        np.testing.assert_array_equal(a.confusion, b.confusion)


class TestRefinedLabels:

    def test_mean_at_fixed_covariate(self, canonical_system):
        n = 100000
        xs = np.full(n, 0.8)
        refined = refine_labels(canonical_system, xs, seed=5)
        q_hat = refinement_posterior(canonical_system, np.array([0.8])).q_hat
        expected = q_hat @ canonical_system.strong.beta[:, 0] * 0.8
        se = refined.y_hat.std(ddof=1) / np.sqrt(n)
        assert abs(refined.y_hat.mean() - expected) < 4 * se
        np.testing.assert_allclose(refined.q_hat[0], q_hat, atol=1e-12)

    def test_same_seed_same_labels(self, canonical_system):
        xs = np.linspace(-1, 1, 50)
        a = refine_labels(canonical_system, xs, seed=2)
        b = refine_labels(canonical_system, xs, seed=2)
        np.testing.assert_array_equal(a.y_hat, b.y_hat)
        assert a.x.shape == (50, 1)

    def test_gauss_hermite_path(self, canonical_system):
        xs = np.linspace(-0.5, 0.5, 7)
        adaptive = refine_labels(canonical_system, xs, seed=1)
        hermite = refine_labels(canonical_system, xs, seed=1, quad=QuadratureConfig(method="gauss_hermite"))
        np.testing.assert_allclose(hermite.q_hat, adaptive.q_hat, atol=1e-6)

    def test_separated_labels_follow_target_expert(self, separated_system):
        refined = refine_labels(separated_system, np.full(2000, 1.0), seed=4)
        assert kstest(refined.y_hat, norm(loc=-1.0, scale=0.1).cdf).pvalue > 0.01

    def test_uninformative_labels_follow_source_mixture(self, make_system):
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[1.0], [1.0]], weak_q=[[1.7], [-1.3]],
                             pi_p=[0.6, 0.4], pi_q=[0.1, 0.9])
        refined = refine_labels(system, np.full(2000, 1.3), seed=8)

        def source_mixture_cdf(t):
            return 0.6 * norm.cdf(t, loc=1.3, scale=0.3) + 0.4 * norm.cdf(t, loc=-1.3, scale=0.3)

        assert kstest(refined.y_hat, source_mixture_cdf).pvalue > 0.01

    @pytest.mark.slow
    def test_label_moments_match_refined_mixture(self, canonical_system):
        grid = np.linspace(-2, 2, 100)
        draws = 10**5
        refined = refine_labels(canonical_system, np.repeat(grid, draws), seed=12)
        y = refined.y_hat.reshape(grid.size, draws)
        q_hat = refined.q_hat[::draws]
        mu = grid[:, None] * canonical_system.strong.beta[:, 0][None, :]
        sd = canonical_system.strong.noise_sd
        first = (q_hat * mu).sum(axis=1)
        second = (q_hat * (mu ** 2 + sd ** 2)).sum(axis=1)
        # 200 comparisons on one seed
        for empirical, exact in ((y, first), (y ** 2, second)):
            se = empirical.std(axis=1, ddof=1) / np.sqrt(draws)
            assert np.all(np.abs(empirical.mean(axis=1) - exact) < 4.5 * se)

    def test_refinement_gap_does_not_shrink_with_n(self, canonical_system):
        grid = np.linspace(-2, 2, 41)
        q_target = gate_weights(grid[:, None], canonical_system.pi_q, canonical_system.gating)
        gaps = []
        for n in (1, 100):
            refined = refine_labels(canonical_system, np.tile(grid, n), seed=n)
            q_hat = refined.q_hat[:grid.size]
            gaps.append(np.abs(q_hat - q_target).max())
        assert gaps[0] > 0.05
        assert gaps[1] == gaps[0]

    def test_empty_input(self, canonical_system):
        with pytest.raises(ValidationError):
            refine_labels(canonical_system, np.empty((0, 1)))


class TestWLIBound:

    def test_zero_source_prior(self, make_system):
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[1.0], [-1.0]], weak_q=[[1.0], [-1.0]],
                             pi_p=[0.0, 1.0], pi_q=[0.5, 0.5])
        res = wli_bound(system, np.array([1.0]), 0, 1, 0.125)
        assert res.bound == 0.0
        assert res.q_hat_k == pytest.approx(0.0, abs=1e-15)

    def test_no_gap_at_origin(self, bhattacharyya_system):
        res = wli_bound(bhattacharyya_system, np.array([0.0]), 1, 0, 0.125)
        assert res.delta_sq == 0.0
        assert res.bound == pytest.approx(res.p_k)
        assert res.q_hat_k <= res.p_k + 1e-9

    def test_bhattacharyya_constant_holds(self, bhattacharyya_system):
        res = wli_bound(bhattacharyya_system, np.array([1.0]), 1, 0, 0.125)
        assert res.delta_sq == pytest.approx(25.0)
        assert res.bound == pytest.approx(0.5 * np.exp(-25.0 / 8.0))
        for x in np.linspace(-3, 3, 50):
            res = wli_bound(bhattacharyya_system, np.array([x]), 1, 0, 0.125)
            assert res.q_hat_k <= res.bound + 1e-9

    def test_calibrated_constant(self, bhattacharyya_system):
        c, holds = calibrate_wli_constant(bhattacharyya_system, np.linspace(0.2, 2.0, 10), 1, 0)
        assert holds
        assert c >= 0.125 * (1 - 1e-6)

    def test_same_concept_rejected(self, canonical_system):
        with pytest.raises(ValidationError):
            wli_bound(canonical_system, np.array([1.0]), 1, 1, 0.125)
        with pytest.raises(ValidationError):
            wli_bound(canonical_system, np.array([1.0]), 0, 1, 0.0)
