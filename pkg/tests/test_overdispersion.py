import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survey_dpd import simulation as sim
from survey_dpd.fitting import fit
from survey_dpd.model import InputError, SurveyDataset
from survey_dpd.objective import NumericError
from survey_dpd.overdispersion import (common_cluster_size, nu_estimating_equation, nu_moments,
                                      nu_per_stratum, reduced_pearson_form, rho_squared_from_nu)


def simulated(dist="multinomial", rho2=0.0, n=150, seed=3, reps=0):
    spec = sim.ScenarioSpec(H=2, n_per_stratum=n, m=21, rho_squared=rho2, distribution=dist,
                            seed=seed)
    return sim.generate_scenario(spec, reps)


class TestMomentEstimator:
    def test_hand_value_single_cluster(self):
        data = SurveyDataset([1], [1], [1.0], [[4, 0]], [[1.0]])
        est = nu_moments(np.zeros((1, 1)), data)
        assert est.nu == pytest.approx(4.0)
        assert est.rho_squared == pytest.approx(1.0)

    def test_exact_fit_gives_zero(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0]])
        data = SurveyDataset([1, 1], [1, 2], [1, 1], [[3, 3], [2, 4]], X)
        beta = np.array([[0.0, np.log(0.5)]])
        assert nu_moments(beta, data).nu == pytest.approx(0.0, abs=1e-14)

    def test_zero_probability_is_reported(self):
        data = SurveyDataset([1], [1], [1.0], [[4, 0]], [[1.0]])
        with pytest.raises(NumericError, match=r"\(1, 1, 2\)"):
            nu_moments(np.array([[800.0]]), data)

    def test_multinomial_data_gives_nu_near_one(self):
        data = simulated()
        res = fit(data, 0.0)
        assert nu_moments(res, data).nu == pytest.approx(1.0, abs=0.1)


class TestEstimatingEquation:
    def test_multinomial_near_one(self):
        data = simulated(n=300)
        est = nu_estimating_equation(fit(data, 0.0), data, 0.0)
        assert est.nu == pytest.approx(1.0, abs=0.15)

    def test_random_clumped_near_six(self):
        data = simulated("rc", 0.25, n=300)
        est = nu_estimating_equation(fit(data, 0.0), data, 0.0)
        assert est.nu == pytest.approx(6.0, rel=0.2)

    def test_identity_when_empirical_equals_model(self, monkeypatch):
        from survey_dpd import overdispersion
        monkeypatch.setattr(overdispersion, "omega_empirical",
                            lambda b, d, c: overdispersion.omega_model_multinomial(b, d, c))
        data = simulated(n=20)
        assert nu_estimating_equation(fit(data, 0.3), data, 0.3).nu == pytest.approx(1.0, abs=1e-12)

    def test_unequal_sizes_refused_unless_m_bar(self):
        data = SurveyDataset([1, 1, 1], [1, 2, 3], [1, 1, 1], [[1, 2], [3, 3], [2, 5]],
                             [[1.0], [1.0], [1.0]])
        with pytest.raises(InputError, match="differ"):
            common_cluster_size(data)
        with pytest.raises(InputError):
            nu_estimating_equation(np.zeros((1, 1)), data, 0.0)
        est = nu_estimating_equation(np.zeros((1, 1)), data, 0.0, m_bar=5.0)
        assert est.m_bar == 5.0 and np.isfinite(est.nu)


class TestPerStratum:
    def test_single_stratum_matches_pooled(self):
        spec = sim.ScenarioSpec(H=1, n_per_stratum=80, rho_squared=0.25)
        data = sim.generate_scenario(spec, 0)
        res = fit(data, 0.2)
        for method, pooled in (("estimating_equation", nu_estimating_equation(res, data, 0.2)),
                               ("moments", nu_moments(res, data))):
            (one,) = nu_per_stratum(res, data, 0.2, method)
            assert one.nu == pytest.approx(pooled.nu, rel=1e-12)
            assert one.scope == "stratum:1" and pooled.scope == "pooled"

    def test_strata_with_different_correlation(self):
        a = sim.generate_scenario(sim.ScenarioSpec(H=1, n_per_stratum=300, rho_squared=0.1,
                                                   seed=1), 0)
        b = sim.generate_scenario(sim.ScenarioSpec(H=1, n_per_stratum=300, rho_squared=0.5,
                                                   seed=2), 0)
        data = SurveyDataset(np.r_[a.strata, b.strata + 1], np.r_[a.clusters, b.clusters],
                             np.ones(600), np.r_[a.counts, b.counts],
                             np.r_[a.covariates, b.covariates])
        est = nu_per_stratum(fit(data, 0.0), data, 0.0)
        assert est[0].rho_squared == pytest.approx(0.1, abs=0.06)
        assert est[1].rho_squared == pytest.approx(0.5, abs=0.12)


class TestHelpers:
    def test_rho_from_nu(self):
        assert rho_squared_from_nu(6.0, 21) == pytest.approx(0.25)
        with pytest.raises(InputError):
            rho_squared_from_nu(2.0, 1)

    def test_out_of_range_flag(self):
        data = SurveyDataset([1], [1], [1.0], [[4, 0]], [[1.0]])
        est = nu_moments(np.array([[3.0]]), data)
        assert est.out_of_range == (not 0 <= est.rho_squared <= 1)
        assert est.to_dict()["scope"] == "pooled"

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=3, max_size=5),
           st.lists(st.floats(0.05, 1.0), min_size=5, max_size=5))
    def test_reduced_pearson_equals_full_sum(self, y, v):
        y = np.array(y, float)
        m = y.sum()
        if m == 0:
            return
        pi = np.array(v[: len(y)])
        pi = pi / pi.sum()
        full = np.sum((y - m * pi) ** 2 / (m * pi))
        assert reduced_pearson_form(y, pi, m) == pytest.approx(full, rel=1e-9, abs=1e-9)
