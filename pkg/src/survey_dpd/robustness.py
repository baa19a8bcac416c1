"""Influence functions under point-mass contamination and deviation metrics."""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .asymptotics import inverse_psd, observed_information, psi_matrix, sandwich
from .model import InputError, beta_for
from .objective import _lam


@dataclass(frozen=True)
class ContaminationPoint:
    """Point mass on one category for cluster ``(stratum, cluster)``."""

    stratum: int
    cluster: int
    t_vector: tuple

    def __post_init__(self):
        t = np.asarray(self.t_vector)
        if t.ndim != 1 or not np.all((t == 0) | (t == 1)) or int(t.sum()) != 1:
            raise InputError("t_vector must be a 0/1 indicator with exactly one 1")
        object.__setattr__(self, "t_vector", tuple(int(v) for v in t))

    @classmethod
    def at_category(cls, stratum, cluster, category, num_categories):
        """``category`` is 1-based, as in the dataset columns."""
        if not 1 <= category <= num_categories:
            raise InputError(f"category must be in 1..{num_categories}")
        t = [0] * num_categories
        t[category - 1] = 1
        return cls(stratum, cluster, tuple(t))

    @property
    def key(self):
        return (self.stratum, self.cluster)


@dataclass(frozen=True)
class ContaminationSet:
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        keys = [p.key for p in pts]
        if len(set(keys)) != len(keys):
            raise InputError("contamination set targets a cluster twice")
        if not pts:
            raise InputError("empty contamination set")
        object.__setattr__(self, "points", pts)


def _as_set(point_or_set):
    if isinstance(point_or_set, ContaminationPoint):
        return ContaminationSet((point_or_set,))
    return point_or_set


def _row(data, point):
    hit = np.flatnonzero((data.strata == point.stratum) & (data.clusters == point.cluster))
    if hit.size != 1:
        raise InputError(f"cluster {point.key} not found in the dataset")
    if len(point.t_vector) != data.num_categories:
        raise InputError("t_vector length differs from the number of categories")
    return int(hit[0])


def u_star(beta, data, cfg, row, g):
    """``w m Delta*(pi) diag^(lam-1)(pi) (g - pi) kron x`` for one cluster row."""
    b = beta_for(data, beta)
    lam = _lam(cfg)
    x = data.covariates[row]
    pi = _kernels.probabilities(b, x[None, :])[0]
    g = np.asarray(g, dtype=float)
    a = _kernels.reduced_residual(pi[None, :], (g - pi)[None, :], lam)[0]
    return data.weights[row] * data.unit_counts[row] * np.kron(a, x)


class _PsiSolver:
    """Cache one factorisation of Psi for repeated IF evaluations."""

    def __init__(self, beta, data, cfg):
        self.psi = psi_matrix(beta, data, cfg)
        self.inv, self.condition_number = inverse_psd(self.psi, "Psi")

    def __call__(self, vec):
        return self.inv @ vec


def if_estimator(beta, data, cfg, point, solver=None):
    """Influence function at the model, ``Psi^-1 (1/n) u*(delta_t)``."""
    return if_estimator_multi(beta, data, cfg, ContaminationSet((point,)), solver)


def if_estimator_multi(beta, data, cfg, cset, solver=None):
    """Sum of single-cluster numerators pushed through one Psi solve."""
    cset = _as_set(cset)
    solver = solver or _PsiSolver(beta, data, cfg)
    num = 0.0
    for p in cset.points:
        num = num + u_star(beta, data, cfg, _row(data, p), p.t_vector)
    return solver(num / data.n_clusters)


def psi_star(beta, data, cfg, row, g):
    """Negative average Jacobian of ``u*`` with cluster ``row`` centred at ``g``
    and every other cluster at its model probabilities."""
    b = beta_for(data, beta)
    targets = _kernels.probabilities(b, data.covariates).copy()
    targets[row] = np.asarray(g, dtype=float)
    return observed_information(b, data, cfg, targets=targets)


def if_estimator_general(beta, data, cfg, point, g):
    """Influence function when the contaminated cluster's true distribution is ``g``."""
    row = _row(data, point)
    g = np.asarray(g, dtype=float)
    if g.shape != (data.num_categories,) or abs(g.sum() - 1.0) > 1e-10 or np.any(g < 0):
        raise InputError("g must be a probability vector over the categories")
    mat = psi_star(beta, data, cfg, row, g)
    num = (u_star(beta, data, cfg, row, point.t_vector) - u_star(beta, data, cfg, row, g))
    num = num / data.n_clusters
    try:
        return np.linalg.solve(mat, num)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Psi* is singular: {exc}") from None


def _null_q(beta0, data, cfg, hyp, tol=1e-8):
    res = hyp.residual(beta_for(data, beta0))
    if np.max(np.abs(res)) > tol:
        raise InputError(f"beta0 is off the null: max |M^T beta0 - l| = {np.max(np.abs(res)):.3g}")
    return sandwich(beta0, data, cfg, variant="multinomial").q


def if2_wald(beta0, data, cfg, hyp, point_or_set):
    """Second-order influence function of the Wald functional at the null,
    ``2 IF^T M (M^T Q M)^-1 M^T IF`` with the model-based ``Q``."""
    q = _null_q(beta0, data, cfg, hyp)
    IF = if_estimator_multi(beta0, data, cfg, _as_set(point_or_set))
    M = hyp.m_matrix
    inner = M.T @ q @ M
    v = M.T @ IF
    return float(2.0 * v @ np.linalg.solve(inner, v))


def contaminated_functional(beta0, data, cfg, point_or_set, eps, max_iter=100, tol=1e-13):
    """Solve ``sum u*_hi(g_hi, beta) = 0`` with ``g = (1-eps) pi(beta0) + eps delta_t``
    on the contaminated clusters and ``g = pi(beta0)`` elsewhere."""
    b0 = beta_for(data, beta0)
    cset = _as_set(point_or_set)
    G = _kernels.probabilities(b0, data.covariates).copy()
    for p in cset.points:
        r = _row(data, p)
        G[r] = (1.0 - eps) * G[r] + eps * np.asarray(p.t_vector, dtype=float)
    X, _, m, w = data.arrays()
    lam = _lam(cfg)
    Y = m[:, None] * G
    beta = b0.copy()
    for _ in range(max_iter):
        u = _kernels.numpy_kernels.cluster_scores(beta, X, Y, m, w, lam).sum(axis=0)
        if np.max(np.abs(u)) < tol * max(1.0, float(m.sum())):
            break
        J = observed_information(beta, data, lam, targets=G) * data.n_clusters
        beta = beta + np.linalg.solve(J, u).reshape(beta.shape)
    return beta


def wald_functional(beta0, data, cfg, hyp, point_or_set, eps):
    """``W(eps)`` evaluated at the contaminated functional with the null ``Q``."""
    q = _null_q(beta0, data, cfg, hyp)
    b = contaminated_functional(beta0, data, cfg, point_or_set, eps)
    res = hyp.residual(b)
    M = hyp.m_matrix
    return float(res @ np.linalg.solve(M.T @ q @ M, res))


def _relative_deviation(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    zero = np.argwhere(b == 0)
    if zero.size:
        raise InputError(f"zero reference entries at {[tuple(z) for z in zero.tolist()]}")
    return np.abs((a - b) / b)


def masd_beta(beta_a, beta_b):
    """Mean absolute standardized deviation of ``beta_a`` from the reference ``beta_b``."""
    return float(np.mean(_relative_deviation(getattr(beta_a, "beta_hat", beta_a),
                                             getattr(beta_b, "beta_hat", beta_b))))


def covariate_patterns(data):
    """Distinct covariate rows in order of first appearance."""
    _, first = np.unique(data.covariates, axis=0, return_index=True)
    return data.covariates[np.sort(first)]


def masd_pi(fit_a, fit_b, data):
    """Mean absolute standardized deviation of fitted probabilities over all
    categories and distinct covariate patterns."""
    Xp = np.ascontiguousarray(covariate_patterns(data))
    ba = beta_for(data, getattr(fit_a, "beta_hat", fit_a))
    bb = beta_for(data, getattr(fit_b, "beta_hat", fit_b))
    Pa = _kernels.probabilities(ba, Xp)
    Pb = _kernels.probabilities(bb, Xp)
    return float(np.mean(_relative_deviation(Pa, Pb)))


def asd(a, b):
    return float(_relative_deviation(np.atleast_1d(a), np.atleast_1d(b))[0])
