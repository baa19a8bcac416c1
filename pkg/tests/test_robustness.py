import numpy as np
import pytest

from conftest import random_dataset
from survey_dpd.asymptotics import psi_matrix
from survey_dpd.inference import LinearHypothesis
from survey_dpd.model import InputError, SurveyDataset, dataset_probabilities
from survey_dpd.robustness import (ContaminationPoint, ContaminationSet, asd,
                                   contaminated_functional, if2_wald, if_estimator,
                                   if_estimator_general, if_estimator_multi, masd_beta, masd_pi,
                                   psi_star, u_star, wald_functional)


@pytest.fixture(scope="module")
def setup():
    data, beta = random_dataset(np.random.default_rng(5), n=10, strata=2)
    return data, beta


def point(data, j, cat):
    return ContaminationPoint.at_category(int(data.strata[j]), int(data.clusters[j]), cat,
                                          data.num_categories)


class TestTypes:
    def test_indicator_validation(self):
        with pytest.raises(InputError):
            ContaminationPoint(1, 1, (1, 1, 0))
        with pytest.raises(InputError):
            ContaminationPoint.at_category(1, 1, 4, 3)

    def test_duplicate_targets(self):
        p = ContaminationPoint(1, 1, (1, 0, 0))
        with pytest.raises(InputError, match="twice"):
            ContaminationSet((p, ContaminationPoint(1, 1, (0, 1, 0))))


class TestEstimatorIF:
    def test_hand_value(self):
        data = SurveyDataset([1], [1], [1.0], [[1, 1]], [[1.0]])
        IF = if_estimator(np.zeros((1, 1)), data, 0.0, ContaminationPoint(1, 1, (1, 0)))
        np.testing.assert_allclose(IF, [2.0], rtol=1e-14)

    @pytest.mark.parametrize("lam", [0.0, 0.5])
    def test_general_reduces_at_model(self, setup, lam):
        data, beta = setup
        p = point(data, 3, 2)
        pi = dataset_probabilities(beta, data)[3]
        np.testing.assert_allclose(if_estimator_general(beta, data, lam, p, pi),
                                   if_estimator(beta, data, lam, p), rtol=1e-10, atol=1e-12)
        delta = np.array(p.t_vector, float)
        np.testing.assert_allclose(if_estimator_general(beta, data, lam, p, delta), 0.0,
                                   atol=1e-15)

    def test_u_star_vanishes_at_model(self, setup):
        data, beta = setup
        pi = dataset_probabilities(beta, data)[0]
        assert np.max(np.abs(u_star(beta, data, 0.3, 0, pi))) < 1e-14

    @pytest.mark.parametrize("lam", [0.0, 0.7])
    def test_psi_star_is_fd_jacobian(self, setup, lam):
        data, beta = setup
        g = np.array([0.2, 0.5, 0.3])
        P0 = dataset_probabilities(beta, data)

        def total(b):
            # targets stay fixed while beta moves
            s = sum(u_star(b, data, lam, r, P0[r]) for r in range(data.n_clusters) if r != 4)
            return s + u_star(b, data, lam, 4, g)

        flat = beta.reshape(-1)
        h = 1e-6
        J = np.column_stack([(total((flat + h * e).reshape(beta.shape))
                              - total((flat - h * e).reshape(beta.shape))) / (2 * h)
                             for e in np.eye(flat.size)])
        np.testing.assert_allclose(psi_star(beta, data, lam, 4, g), -J / data.n_clusters,
                                   atol=1e-7)
        np.testing.assert_allclose(psi_star(beta, data, lam, 4, P0[4]),
                                   psi_matrix(beta, data, lam), atol=1e-12)

    def test_multi_is_additive(self, setup):
        data, beta = setup
        a, b, c = point(data, 0, 1), point(data, 5, 3), point(data, 7, 2)
        tot = if_estimator_multi(beta, data, 0.4, ContaminationSet((a, b, c)))
        parts = (if_estimator_multi(beta, data, 0.4, ContaminationSet((a, b)))
                 + if_estimator(beta, data, 0.4, c))
        np.testing.assert_allclose(tot, parts, rtol=1e-12, atol=1e-14)

    def test_all_clusters_at_argmax_is_finite(self, setup):
        data, beta = setup
        P = dataset_probabilities(beta, data)
        pts = tuple(point(data, j, int(np.argmax(P[j])) + 1) for j in range(data.n_clusters))
        assert np.all(np.isfinite(if_estimator_multi(beta, data, 0.5, ContaminationSet(pts))))

    def test_derivative_of_contaminated_functional(self, setup):
        data, beta = setup
        p = point(data, 2, 1)
        eps = 1e-6
        fd = (contaminated_functional(beta, data, 0.5, p, eps)
              - contaminated_functional(beta, data, 0.5, p, -eps)) / (2 * eps)
        np.testing.assert_allclose(fd.reshape(-1), if_estimator(beta, data, 0.5, p),
                                   rtol=1e-5, atol=1e-8)


class TestWaldIF:
    def hyp(self, beta, cols=(1,)):
        flat = beta.reshape(-1)
        M = np.eye(flat.size)[:, list(cols)]
        return LinearHypothesis(M, M.T @ flat)

    def test_off_null_is_an_error(self, setup):
        data, beta = setup
        hyp = LinearHypothesis.single(beta.size, 0, beta.reshape(-1)[0] + 0.1)
        with pytest.raises(InputError, match="null"):
            if2_wald(beta, data, 0.3, hyp, point(data, 0, 1))

    def test_first_order_vanishes_and_second_order_matches(self, setup):
        data, beta = setup
        hyp = self.hyp(beta, (0, 4))
        p = point(data, 6, 3)
        eps = 1e-4
        w_plus = wald_functional(beta, data, 0.4, hyp, p, eps)
        w_minus = wald_functional(beta, data, 0.4, hyp, p, -eps)
        assert abs((w_plus - w_minus) / (2 * eps)) < 1e-6
        if2 = if2_wald(beta, data, 0.4, hyp, p)
        assert if2 > 0
        assert (w_plus + w_minus) / eps**2 == pytest.approx(if2, rel=1e-4)

    def test_zero_when_if_in_null_space(self, setup, monkeypatch):
        data, beta = setup
        from survey_dpd import robustness
        monkeypatch.setattr(robustness, "if_estimator_multi",
                            lambda *a, **k: np.r_[0.0, 0.0, 1.0, 2.0, 0.0, 3.0])
        assert if2_wald(beta, data, 0.0, self.hyp(beta, (0, 1)), point(data, 0, 1)) == 0.0


class TestMetrics:
    def test_identical_is_zero(self, setup):
        data, beta = setup
        assert masd_beta(beta, beta) == 0.0
        assert masd_pi(beta, beta, data) == 0.0

    def test_values(self):
        assert masd_beta(np.array([[2.0, 3.0]]), np.array([[1.0, 4.0]])) == pytest.approx(0.625)
        assert asd(0.3, 0.2) == pytest.approx(0.5)

    def test_zero_reference_is_named(self):
        with pytest.raises(InputError, match=r"\(0, 1\)"):
            masd_beta(np.ones((1, 2)), np.array([[1.0, 0.0]]))
