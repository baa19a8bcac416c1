"""Quasi weighted loglikelihood, DPD kernel objective and estimating function.

The DPD objective drops the additive constant that does not depend on
beta. At ``lambda = 0`` the estimator is the maximum quasi weighted
likelihood one; the kernel itself is only defined for ``lambda > 0``
and tends (up to that constant and scaling) to ``-loglik``.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .model import InputError, beta_for, model_probabilities


class NumericError(ArithmeticError):
    pass


class BranchError(ValueError):
    """Raised when the lambda = 0 branch is requested from a lambda > 0 routine."""


@dataclass(frozen=True)
class DpdConfig:
    lam: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InputError(f"lambda must be a finite nonnegative number, got {self.lam}")

    @property
    def is_likelihood(self):
        return self.lam == 0.0


def _lam(cfg):
    return cfg.lam if isinstance(cfg, DpdConfig) else DpdConfig(float(cfg)).lam


def quasi_weighted_loglik(beta, data):
    """``sum_hi w_hi log(pi_hi)^T y_hi``."""
    b = beta_for(data, beta)
    X, Y, m, w = data.arrays()
    P = _kernels.probabilities(b, X)
    if np.any(P <= _kernels.PROB_FLOOR):
        rows = np.flatnonzero(np.any((P <= _kernels.PROB_FLOOR) & (Y > 0), axis=1))
        if rows.size:
            keys = [data.records()[i].key for i in rows[:5]]
            raise NumericError(f"probability underflow with positive counts in clusters {keys}")
    return float(np.sum(w * np.sum(Y * np.log(P), axis=1)))


def dpd_kernel_objective(beta, data, cfg):
    """Weighted DPD kernel ``sum w pi^lam . (m pi - (lam+1)/lam y)``; lambda > 0 only."""
    lam = _lam(cfg)
    if lam == 0.0:
        raise BranchError("the DPD kernel is undefined at lambda=0; minimise "
                          "-quasi_weighted_loglik instead")
    X, Y, m, w = data.arrays()
    return float(_kernels.objective(beta_for(data, beta), X, Y, m, w, lam))


def minimisation_objective(beta, data, cfg):
    """The function the fit minimises: the DPD kernel, or -loglik at lambda = 0."""
    lam = _lam(cfg)
    X, Y, m, w = data.arrays()
    return float(_kernels.objective(beta_for(data, beta), X, Y, m, w, lam))


def cluster_scores(beta, data, cfg):
    """Per-cluster contributions ``u_lambda(beta, x_hi)``, shape (n, d(k+1))."""
    lam = _lam(cfg)
    b = beta_for(data, beta)
    X, Y, m, w = data.arrays()
    return _kernels.cluster_scores(b, X, Y, m, w, lam)


def estimating_function(beta, data, cfg):
    """``u_lambda(beta)``; its root is the minimum quasi weighted DPD estimate.

    Stacked category-major: entry ``r*(k+1) + s`` is the derivative
    direction of ``beta[r, s]``.
    """
    lam = _lam(cfg)
    b = beta_for(data, beta)
    X, Y, m, w = data.arrays()
    u, _, _ = _kernels.accumulate(b, X, Y, m, w, lam, False)
    return u


def cluster_score(beta, record, cfg):
    """Single-cluster estimating function contribution for a ClusterRecord."""
    lam = _lam(cfg)
    x = np.asarray(record.covariates, dtype=float)
    y = np.asarray(record.counts, dtype=float)
    pi = model_probabilities(beta, x)
    if len(y) != len(pi):
        raise InputError("counts and beta disagree on the number of categories")
    a = record.weight * _kernels.reduced_residual(
        pi[None, :], (y - record.unit_count * pi)[None, :], lam)[0]
    return np.kron(a, x)


def quasi_likelihood_score(beta, data):
    """Score of the quasi weighted loglikelihood in its simplified form,
    ``sum w (y* - m pi*) kron x``; an independent route to u_0."""
    b = beta_for(data, beta)
    X, Y, m, w = data.arrays()
    P = _kernels.probabilities(b, X)
    resid = w[:, None] * (Y[:, :-1] - m[:, None] * P[:, :-1])
    return np.einsum("nr,ns->rs", resid, X).reshape(-1)
