"""
Tests for EM fitting of source triples and target weak pairs
"""
import numpy as np
import pytest
from scipy.stats import norm

import em_estimation
from concept_mixture import GatingKind, GatingParams, SourceDataset, gate_weights, sample_source, sample_target
from em_estimation import (STRONG, WEAK, EMConfig, MixtureParams, fit_source_mle, fit_target_mle,
                           loglikelihood)
from errors import ValidationError
from metrics import ParamFamily, best_permutation, metric_param_error


def _ridge(x, y, ridge):
    return np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)


class TestEMConfig:

    def test_rejects_unknown_init(self):
        with pytest.raises(ValidationError):
            EMConfig(init="bogus")

    def test_rejects_zero_restarts(self):
        with pytest.raises(ValidationError):
            EMConfig(restarts=0)

    def test_gating_kind_from_string(self):
        assert EMConfig(gating_kind="gaussian").gating_kind is GatingKind.GAUSSIAN


class TestLoglikelihood:

    def test_single_record_closed_form(self):
        data = SourceDataset(x=np.array([[0.5]]), y=np.array([1.2]), y_weak=np.array([0.4]))
        params = MixtureParams(np.ones(1), GatingParams.constant(1, 1),
                               {STRONG: np.array([[2.0]]), WEAK: np.array([[1.0]])}, 0.7)
        expected = norm.logpdf(1.2, loc=1.0, scale=0.7) + norm.logpdf(0.4, loc=0.5, scale=0.7)
        assert loglikelihood(data, params) == pytest.approx(expected, abs=1e-12)

    def test_equal_experts_collapse(self, canonical_system):
        data = sample_source(canonical_system, 300, seed=1)
        betas = {STRONG: np.array([[0.7], [0.7]]), WEAK: np.array([[1.1], [1.1]])}
        one = MixtureParams(np.ones(1), GatingParams.constant(1, 1),
                            {STRONG: np.array([[0.7]]), WEAK: np.array([[1.1]])}, 0.4)
        for pi in ([0.5, 0.5], [0.9, 0.1]):
            two = MixtureParams(np.array(pi), GatingParams.constant(2, 1), betas, 0.4)
            assert loglikelihood(data, two) == pytest.approx(loglikelihood(data, one), abs=1e-9)

    def test_matches_enumeration_over_concepts(self, gaussian_system):
        data = sample_source(gaussian_system, 50, seed=2)
        params = MixtureParams.from_system(gaussian_system)
        total = 0.0
        for x, y, yw in zip(data.x, data.y, data.y_weak):
            w = gate_weights(x, params.pi, params.gating)
            dens = sum(w[k] * norm.pdf(y, params.betas[STRONG][k] @ x, params.sigma)
                       * norm.pdf(yw, params.betas[WEAK][k] @ x, params.sigma) for k in range(2))
            total += np.log(dens)
        assert loglikelihood(data, params) == pytest.approx(total, rel=1e-10)


class TestSingleConcept:

    def test_source_fit_is_ridge(self, canonical_system):
        data = sample_source(canonical_system, 500, seed=3)
        cfg = EMConfig(restarts=2)
        fit = fit_source_mle(data, 1, cfg)
        np.testing.assert_allclose(fit.beta_hat[STRONG][0], _ridge(data.x, data.y, cfg.ridge), rtol=1e-10)
        np.testing.assert_allclose(fit.beta_hat[WEAK][0], _ridge(data.x, data.y_weak, cfg.ridge), rtol=1e-10)
        np.testing.assert_array_equal(fit.pi_hat, [1.0])
        assert fit.converged

    def test_target_fit_is_ridge(self, canonical_system):
        data = sample_target(canonical_system, 500, seed=4)
        fit = fit_target_mle(data, 1, EMConfig(restarts=1))
        np.testing.assert_allclose(fit.beta_hat[WEAK][0], _ridge(data.x, data.y_weak, EMConfig().ridge), rtol=1e-10)
        assert STRONG not in fit.beta_hat

    def test_too_few_records(self, canonical_system):
        with pytest.raises(ValidationError):
            fit_source_mle(sample_source(canonical_system, 8, seed=0), 2)


class TestTwoConcepts:

    @pytest.fixture
    def recovery_system(self, make_system):
        return make_system(strong=[[1.0], [-1.0]], weak_p=[[2.0], [-2.0]], weak_q=[[2.2], [-1.8]],
                           pi_p=[0.6, 0.4], pi_q=[0.2, 0.8])

    def test_trace_is_monotone(self, canonical_system):
        data = sample_source(canonical_system, 2000, seed=6)
        fit = fit_source_mle(data, 2, EMConfig(restarts=2, strict_monotone=True))
        assert np.all(np.diff(fit.trace) >= -1e-9 * data.n)
        assert fit.restarts_used == 2

    def test_same_seed_same_fit(self, canonical_system):
        data = sample_source(canonical_system, 1000, seed=7)
        a = fit_source_mle(data, 2, EMConfig(restarts=3, seed=5))
        b = fit_source_mle(data, 2, EMConfig(restarts=3, seed=5))
        np.testing.assert_array_equal(a.beta_hat[STRONG], b.beta_hat[STRONG])
        assert a.loglik == b.loglik

    def test_threaded_restarts_match_serial(self, canonical_system):
        data = sample_source(canonical_system, 1000, seed=8)
        serial = fit_source_mle(data, 2, EMConfig(restarts=4, seed=1))
        threaded = fit_source_mle(data, 2, EMConfig(restarts=4, seed=1, n_jobs=4))
        assert serial.loglik == threaded.loglik

    def test_source_recovery(self, recovery_system):
        data = sample_source(recovery_system, 20000, seed=11)
        fit = fit_source_mle(data, 2, EMConfig(restarts=3, seed=2))
        assert metric_param_error(fit, recovery_system, ParamFamily.SOURCE_JOINT) < 0.05
        truth = MixtureParams.from_system(recovery_system)
        assert fit.loglik >= loglikelihood(data, truth) - 1e-6 * data.n

    def test_noiseless_source_recovery_is_exact(self, make_system):
        system = make_system(strong=[[1.0], [-1.0]], weak_p=[[2.0], [-2.0]], weak_q=[[2.2], [-1.8]],
                             pi_p=[0.6, 0.4], pi_q=[0.2, 0.8], noise_sd=0.0)
        fit = fit_source_mle(sample_source(system, 4000, seed=16), 2, EMConfig(restarts=3, seed=6))
        assert metric_param_error(fit, system, ParamFamily.STRONG) < 1e-8
        assert metric_param_error(fit, system, ParamFamily.WEAK_P) < 1e-8

    def test_target_recovery_with_fixed_gating(self, recovery_system):
        data = sample_target(recovery_system, 20000, seed=12)
        fit = fit_target_mle(data, 2, EMConfig(restarts=3, seed=3), gating_fixed=recovery_system.gating)
        assert metric_param_error(fit, recovery_system, ParamFamily.WEAK_Q) < 0.05
        assert metric_param_error(fit, recovery_system, ParamFamily.PRIOR_Q) < 0.05

    def test_warm_start_from_source_weak_experts(self, canonical_system):
        data = sample_target(canonical_system, 4000, seed=13)
        init = MixtureParams(np.array([0.5, 0.5]), canonical_system.gating,
                             {WEAK: np.array(canonical_system.weak_p.beta)}, 0.3)
        fit = fit_target_mle(data, 2, EMConfig(), gating_fixed=canonical_system.gating, init_params=init)
        # no relabelling: component k stays attached to source weak expert k
        np.testing.assert_allclose(fit.beta_hat[WEAK], canonical_system.weak_q.beta, atol=0.05)
        np.testing.assert_allclose(fit.pi_hat, canonical_system.pi_q, atol=0.03)
        assert fit.restarts_used == 1

    @pytest.mark.slow
    def test_gaussian_gating_recovery(self, gaussian_system):
        data = sample_source(gaussian_system, 8000, seed=14)
        cfg = EMConfig(restarts=4, seed=4, gating_kind=GatingKind.GAUSSIAN, gating_variance=1.0)
        fit = fit_source_mle(data, 2, cfg)
        assert metric_param_error(fit, gaussian_system, ParamFamily.STRONG) < 0.05
        perm, _ = best_permutation(fit.beta_hat[STRONG], gaussian_system.strong.beta)
        grid = np.random.default_rng(0).standard_normal((200, 2))
        fitted = gate_weights(grid, fit.pi_hat, fit.params.gating)[:, list(perm)]
        truth = gate_weights(grid, gaussian_system.pi_p, gaussian_system.gating)
        assert np.abs(fitted - truth).max() < 0.1


class TestLabelSwitching:

    def test_permuted_fit_has_same_loglik(self, canonical_system, gaussian_system):
        cases = [(canonical_system, EMConfig(restarts=2, seed=1)),
                 (gaussian_system, EMConfig(restarts=2, seed=1, gating_kind=GatingKind.GAUSSIAN))]
        for system, cfg in cases:
            data = sample_source(system, 1000, seed=15)
            fit = fit_source_mle(data, 2, cfg)
            swapped = fit.params.permuted([1, 0])
            assert loglikelihood(data, swapped) == pytest.approx(fit.loglik, abs=1e-10)
            assert loglikelihood(data, fit.params) == pytest.approx(fit.loglik, abs=1e-10)


@pytest.mark.slow
class TestRecoveryAcrossReplicates:

    @pytest.fixture
    def recovery_system(self, make_system):
        return make_system(strong=[[1.0], [-1.0]], weak_p=[[2.0], [-2.0]], weak_q=[[2.2], [-1.8]],
                           pi_p=[0.6, 0.4], pi_q=[0.2, 0.8])

    def test_error_shrinks_with_n(self, recovery_system):
        medians = []
        for n in (1000, 4000, 16000):
            errors = [metric_param_error(fit_source_mle(sample_source(recovery_system, n, seed=100 * r + 1),
                                                        2, EMConfig(restarts=3, seed=r)),
                                         recovery_system, ParamFamily.SOURCE_JOINT)
                      for r in range(20)]
            medians.append(np.median(errors))
        assert medians[0] > medians[1] > medians[2]

    def test_most_replicates_recover_parameters(self, recovery_system):
        recovered = sum(
            metric_param_error(fit_source_mle(sample_source(recovery_system, 20000, seed=500 + r), 2,
                                              EMConfig(restarts=3, seed=r)),
                               recovery_system, ParamFamily.SOURCE_JOINT) < 0.05
            for r in range(20))
        assert recovered >= 18


class TestGatingStep:

    def test_rejected_locations_keep_previous_pair(self, monkeypatch):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((200, 1))
        r = np.column_stack([x[:, 0] < 0, x[:, 0] >= 0]).astype(float)
        pi = np.array([0.3, 0.7])
        gating = GatingParams(eta=[[-1.0], [1.0]], kind=GatingKind.GAUSSIAN, variance=1.0)

        def rejecting(*args, **kwargs):
            raise ValidationError("gating locations coincide")

        monkeypatch.setattr(em_estimation, "GatingParams", rejecting)
        new_pi, new_gating = em_estimation._softmax_gating_step(x, r, pi, gating, learn_eta=True)
        np.testing.assert_array_equal(new_pi, pi)
        assert new_gating is gating
