"""Wald-type tests of ``M^T beta = l`` with power and sample-size tools.

Power and noncentrality use the ``n``-free covariance ``Sigma = n q``
(``CovarianceBundle.asymptotic_cov``); with it ``W_n = n l(beta_hat)``
where ``l(b) = (M^T b - l)^T (M^T Sigma M)^-1 (M^T b - l)``.
"""
from dataclasses import dataclass
import json
import math

import numpy as np
from scipy import stats

from .model import InputError

DEFAULT_ALPHA = 0.05


class SingularHypothesisError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class LinearHypothesis:
    """``H0: M^T beta = l`` with ``M`` of shape (d(k+1), r), full column rank."""

    m_matrix: np.ndarray
    l_vector: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.m_matrix, dtype=float))
        if M.shape[0] == 1 and M.shape[1] > 1 and np.size(self.l_vector) == 1:
            M = M.T  # a single row given for a one-restriction hypothesis
        l = np.atleast_1d(np.asarray(self.l_vector, dtype=float))
        if M.shape[1] != l.shape[0]:
            raise InputError(f"M has {M.shape[1]} columns but l has length {l.shape[0]}")
        if M.shape[1] > M.shape[0]:
            raise InputError("more restrictions than parameters")
        if np.linalg.matrix_rank(M, tol=1e-10) != M.shape[1]:
            raise InputError("M must have full column rank")
        object.__setattr__(self, "m_matrix", M)
        object.__setattr__(self, "l_vector", l)

    @property
    def r(self):
        return self.m_matrix.shape[1]

    @property
    def n_params(self):
        return self.m_matrix.shape[0]

    @classmethod
    def single(cls, n_params, index, value):
        """Hypothesis fixing one stacked coefficient: ``beta[index] = value``."""
        M = np.zeros((n_params, 1))
        M[index, 0] = 1.0
        return cls(M, [value])

    def residual(self, beta):
        b = np.asarray(beta, dtype=float).reshape(-1)
        if b.size != self.n_params:
            raise InputError(f"beta has {b.size} entries, hypothesis expects {self.n_params}")
        return self.m_matrix.T @ b - self.l_vector

    def to_json(self, alpha=DEFAULT_ALPHA):
        return json.dumps({"M": self.m_matrix.tolist(), "l": self.l_vector.tolist(),
                           "alpha": alpha})

    @classmethod
    def from_json(cls, text, n_params=None):
        """Parse ``{"M": [[...]], "l": [...], "alpha": a}``; returns ``(hyp, alpha)``.

        ``M`` is row-major with one row per parameter. A matrix with one row
        per restriction (shape r x n_params) is accepted when ``n_params``
        identifies the orientation.
        """
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"hypothesis is not valid JSON: {exc}") from None
        if not isinstance(obj, dict) or "M" not in obj or "l" not in obj:
            raise InputError('hypothesis JSON needs keys "M" and "l"')
        M = np.array(obj["M"], dtype=float)
        if M.ndim != 2:
            raise InputError("M must be a matrix")
        if n_params is not None:
            if M.shape[0] != n_params and M.shape[1] == n_params:
                M = M.T
            if M.shape[0] != n_params:
                raise InputError(f"M has {M.shape[0]} rows, model has {n_params} parameters")
        alpha = float(obj.get("alpha", DEFAULT_ALPHA))
        _check_alpha(alpha)
        return cls(M, obj["l"]), alpha


@dataclass(frozen=True)
class TestResult:
    statistic: float
    dof: int
    critical_value: float
    p_value: float
    reject: bool
    alpha: float

    __test__ = False  # not a pytest class

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class PowerResult:
    approx_power: float
    sigma_beta_star: float
    l_value: float
    n_used: int

    def to_dict(self):
        return dict(self.__dict__)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def chi_square_quantile(r, alpha):
    """Upper-alpha critical value ``chi^2_{r, alpha}``."""
    if r < 1:
        raise InputError("degrees of freedom must be >= 1")
    _check_alpha(alpha)
    return float(stats.chi2.isf(alpha, r))


def chi_square_cdf(r, x):
    if r < 1:
        raise InputError("degrees of freedom must be >= 1")
    return float(stats.chi2.cdf(x, r))


def noncentral_chi_square_cdf(r, ncp, x):
    if r < 1:
        raise InputError("degrees of freedom must be >= 1")
    if ncp < 0:
        raise InputError("noncentrality must be nonnegative")
    if ncp == 0:
        return chi_square_cdf(r, x)
    return float(stats.ncx2.cdf(x, r, ncp))


def _inner_inverse(hyp, cov, what):
    inner = hyp.m_matrix.T @ cov @ hyp.m_matrix
    inner = 0.5 * (inner + inner.T)
    cond = np.linalg.cond(inner)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularHypothesisError(f"M^T {what} M is singular (condition number {cond:.3g})")
    return np.linalg.inv(inner)


def wald_statistic(fit, bundle, hyp, alpha=DEFAULT_ALPHA):
    """Wald-type statistic ``(M^T b - l)^T (M^T Q M)^-1 (M^T b - l)`` and decision."""
    _check_alpha(alpha)
    beta = getattr(fit, "beta_hat", fit)
    res = hyp.residual(beta)
    inv = _inner_inverse(hyp, bundle.q, "Q")
    W = max(float(res @ inv @ res), 0.0)
    crit = chi_square_quantile(hyp.r, alpha)
    p = float(stats.chi2.sf(W, hyp.r))
    return TestResult(statistic=W, dof=hyp.r, critical_value=crit, p_value=min(max(p, 0.0), 1.0),
                      reject=bool(W > crit), alpha=alpha)


def _l_and_grad(beta_star, hyp, cov):
    res = hyp.residual(beta_star)
    inv = _inner_inverse(hyp, cov, "Sigma")
    l_val = float(res @ inv @ res)
    grad = 2.0 * hyp.m_matrix @ (inv @ res)
    return l_val, grad


def _sigma(beta_star, hyp, bundle):
    cov = bundle.asymptotic_cov
    l_val, grad = _l_and_grad(beta_star, hyp, cov)
    if l_val <= 0.0:
        raise InputError("beta_star lies on the null; the power approximation is degenerate")
    return l_val, math.sqrt(float(grad @ cov @ grad))


def approximate_power(beta_star, hyp, bundle, n, alpha=DEFAULT_ALPHA):
    """Normal approximation to the power at ``beta_star`` with ``n`` clusters."""
    if n < 1:
        raise InputError("n must be >= 1")
    l_val, sigma = _sigma(beta_star, hyp, bundle)
    crit = chi_square_quantile(hyp.r, alpha)
    root_n = math.sqrt(n)
    z = (crit / root_n - root_n * l_val) / sigma
    po = float(stats.norm.sf(z))
    return PowerResult(approx_power=po, sigma_beta_star=sigma, l_value=l_val, n_used=int(n))


def critical_sample_size(beta_star, hyp, bundle, alpha, target_power):
    """Real ``n*`` solving ``approximate_power(n*) = target_power``.

    With ``t = sqrt(n)`` the power equation is the quadratic
    ``l t^2 + sigma z t - chi2 = 0`` where ``z = Phi^-1(1 - target)``.
    """
    _check_alpha(alpha)
    if not alpha < target_power < 1.0:
        raise InputError("target power must lie in (alpha, 1)")
    l_val, sigma = _sigma(beta_star, hyp, bundle)
    return sample_size_closed_form(l_val, sigma, chi_square_quantile(hyp.r, alpha),
                                   target_power)


def sample_size_closed_form(l_val, sigma, crit, target_power):
    """Positive root ``n*`` of the power equation for given ``l``, ``sigma`` and
    critical value. Written out,
    ``n* = (A + B + sqrt(A (A + 2B))) / (2 l^2)`` with ``A = sigma^2 z^2``,
    ``B = 2 chi2 l`` and ``z = Phi^-1(1 - target)`` (for target power above 1/2).
    """
    if l_val <= 0 or sigma <= 0:
        raise InputError("l and sigma must be positive")
    z = float(stats.norm.ppf(1.0 - target_power))
    sz = sigma * z
    t = (-sz + math.sqrt(sz * sz + 4.0 * l_val * crit)) / (2.0 * l_val)
    return t * t


def required_sample_size(beta_star, hyp, bundle, alpha=DEFAULT_ALPHA, target_power=0.8):
    """Smallest integer ``n = floor(n*) + 1`` reaching ``target_power``."""
    return int(math.floor(critical_sample_size(beta_star, hyp, bundle, alpha, target_power))) + 1


def contiguous_noncentrality(hyp, bundle, d_vector=None, delta_vector=None):
    """Noncentrality of the limiting chi-square under local alternatives.

    Give ``d_vector`` for ``beta_n = beta_0 + d / sqrt(n)`` or
    ``delta_vector`` for ``M^T beta_n - l = delta / sqrt(n)``.
    """
    if (d_vector is None) == (delta_vector is None):
        raise InputError("give exactly one of d_vector and delta_vector")
    inv = _inner_inverse(hyp, bundle.asymptotic_cov, "Sigma")
    if d_vector is not None:
        d = np.asarray(d_vector, dtype=float).reshape(-1)
        if d.size != hyp.n_params:
            raise InputError(f"d has {d.size} entries, expected {hyp.n_params}")
        M = hyp.m_matrix
        return float(d @ M @ inv @ M.T @ d)
    else:
        delta = np.asarray(delta_vector, dtype=float).reshape(-1)
        if delta.size != hyp.r:
            raise InputError(f"delta has {delta.size} entries, expected {hyp.r}")
        return float(delta @ inv @ delta)
