import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dataset
from survey_dpd.asymptotics import IdentifiabilityError
from survey_dpd.fitting import DivergenceWarning, FitConfig, check_design_rank, fit
from survey_dpd.model import InputError, SurveyDataset, dataset_probabilities
from survey_dpd.objective import estimating_function, minimisation_objective


def saturated_data(rng, groups=3, per_group=6, K=3):
    """One-hot covariate patterns: the fitted probabilities are weighted proportions."""
    n = groups * per_group
    g = np.repeat(np.arange(groups), per_group)
    X = np.eye(groups)[g]
    m = rng.integers(5, 25, size=n)
    Y = np.array([rng.multinomial(mi, rng.dirichlet(np.full(K, 3.0))) for mi in m])
    w = rng.uniform(0.5, 3, size=n)
    data = SurveyDataset(np.ones(n, int), np.arange(1, n + 1), w, Y, X, intercept=False)
    props = np.array([(w[g == j, None] * Y[g == j]).sum(0) / (w[g == j] * m[g == j]).sum()
                      for j in range(groups)])
    return data, props[g]


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(InputError):
            FitConfig(max_iterations=0)
        with pytest.raises(InputError):
            FitConfig(method="bfgs")
        with pytest.raises(InputError):
            FitConfig(gradient_tolerance=0.0)


class TestClosedForms:
    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
    def test_saturated_design_gives_weighted_proportions(self, rng, lam):
        data, props = saturated_data(rng)
        res = fit(data, lam)
        assert res.converged
        np.testing.assert_allclose(dataset_probabilities(res.beta_hat, data), props, atol=1e-7)

    def test_binary_intercept_only_is_weighted_logit(self):
        Y = np.array([[3, 7], [5, 5], [1, 9]])
        w = np.array([1.0, 2.0, 0.5])
        data = SurveyDataset([1, 1, 2], [1, 2, 1], w, Y, np.ones((3, 1)))
        p = (w * Y[:, 0]).sum() / (w * Y.sum(1)).sum()
        res = fit(data, 0.0, FitConfig(gradient_tolerance=1e-10))
        assert res.beta_hat[0, 0] == pytest.approx(np.log(p / (1 - p)), abs=1e-9)


class TestFit:
    @pytest.mark.parametrize("lam", [0.0, 0.2, 0.6, 1.0])
    def test_root_and_local_minimum(self, rng, lam):
        data, _ = random_dataset(rng, n=40)
        res = fit(data, lam)
        assert res.converged
        assert res.final_gradient_norm <= 1e-6
        assert np.max(np.abs(estimating_function(res.beta_hat, data, lam))) <= 1e-6
        f0 = minimisation_objective(res.beta_hat, data, lam)
        for _ in range(10):
            delta = 1e-3 * rng.standard_normal(res.beta_hat.shape)
            assert minimisation_objective(res.beta_hat + delta, data, lam) >= f0 - 1e-9

    def test_newton_and_fisher_agree(self, rng):
        data, _ = random_dataset(rng, n=40)
        a = fit(data, 0.5, FitConfig(gradient_tolerance=1e-9))
        b = fit(data, 0.5, FitConfig(gradient_tolerance=1e-9, method="newton"))
        np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-7)

    def test_multistart_and_initial_value(self, rng):
        data, beta = random_dataset(rng, n=40)
        a = fit(data, 0.4)
        b = fit(data, 0.4, FitConfig(n_starts=4, initial_beta=beta))
        np.testing.assert_allclose(a.beta_hat, b.beta_hat, atol=1e-5)

    def test_drops_empty_clusters(self, rng):
        data, _ = random_dataset(rng, n=20)
        w = data.weights.copy()
        w[0] = 0.0
        res = fit(data.with_weights(w), 0.0)
        assert res.n_dropped == 1 and res.converged

    def test_rank_deficient_design(self, rng):
        data, _ = random_dataset(rng, n=20, k=1)
        X = np.column_stack([data.covariates, 2 * data.covariates[:, 1]])
        with pytest.raises(IdentifiabilityError, match=r"\[2\]|\[1\]"):
            fit(data.with_covariates(X), 0.0)
        with pytest.raises(IdentifiabilityError):
            check_design_rank(X)

    def test_separation_warns(self):
        X = np.column_stack([np.ones(6), [-0.3, -0.2, -0.1, 0.1, 0.2, 0.3]])
        Y = np.array([[5, 0], [5, 0], [5, 0], [0, 5], [0, 5], [0, 5]])
        data = SurveyDataset(np.ones(6, int), np.arange(1, 7), np.ones(6), Y, X)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = fit(data, 0.0, FitConfig(max_iterations=60))
        assert any(issubclass(c.category, DivergenceWarning) for c in caught)
        assert "divergence" in res.warnings

    def test_result_dict(self, small_data):
        res = fit(small_data[0], 0.3)
        d = res.to_dict()
        assert d["lambda"] == 0.3 and len(d["beta_hat"]) == 2

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.2, 5.0), st.sampled_from([0.0, 0.5]))
    def test_covariate_rescaling_equivariance(self, seed, c, lam):
        data, _ = random_dataset(np.random.default_rng(seed), n=30)
        X = data.covariates.copy()
        X[:, 1] *= c
        a = fit(data, lam, FitConfig(gradient_tolerance=1e-9))
        b = fit(data.with_covariates(X), lam, FitConfig(gradient_tolerance=1e-9))
        if not (a.converged and b.converged) or np.linalg.norm(a.beta_hat) > 20:
            return
        expect = a.beta_hat.copy()
        expect[:, 1] /= c
        np.testing.assert_allclose(b.beta_hat, expect, atol=1e-6)
