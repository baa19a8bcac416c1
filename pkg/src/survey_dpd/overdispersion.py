"""Overdispersion ``nu`` and intra-cluster correlation ``rho^2`` estimates.

Two estimators are provided. The estimating-equation one compares the
empirical Omega with its multinomial-model counterpart through a ratio of
traces; the moment one is a Pearson-type average. Both assume a common
cluster size ``m_bar`` (pooled) or one per stratum (per-stratum variant).
Values are reported unclipped; ``out_of_range`` flags ``rho^2`` outside
``[0, 1]``.
"""
from dataclasses import dataclass
import enum

import numpy as np

from . import _kernels
from .asymptotics import inverse_psd, omega_empirical, omega_model_multinomial
from .model import InputError, beta_for
from .objective import NumericError, _lam


class Method(str, enum.Enum):
    ESTIMATING_EQUATION = "estimating_equation"
    MOMENTS = "moments"


@dataclass(frozen=True)
class OverdispersionEstimate:
    nu: float
    rho_squared: float
    method: Method
    m_bar: float
    stratum: object = None  # None for the pooled estimate

    @property
    def scope(self):
        return "pooled" if self.stratum is None else f"stratum:{self.stratum}"

    @property
    def out_of_range(self):
        return not (0.0 <= self.rho_squared <= 1.0)

    def to_dict(self):
        return {"nu": self.nu, "rho_squared": self.rho_squared, "method": self.method.value,
                "m_bar": self.m_bar, "scope": self.scope, "out_of_range": self.out_of_range}


def rho_squared_from_nu(nu, m_bar):
    if m_bar <= 1:
        raise InputError("rho^2 needs a common cluster size above 1")
    return (nu - 1.0) / (m_bar - 1.0)


def common_cluster_size(data):
    m = data.unit_counts
    if m.size == 0:
        raise InputError("empty dataset")
    if not np.all(m == m[0]):
        raise InputError(
            f"cluster sizes differ ({int(m.min())}..{int(m.max())}); the pooled "
            "estimators need a common m, use the per-stratum variant if sizes are "
            "constant within strata"
        )
    return float(m[0])


def _beta(fit_or_beta, data):
    b = getattr(fit_or_beta, "beta_hat", fit_or_beta)
    return beta_for(data, b)


def _nu_E(beta, data, cfg, m_bar=None):
    if m_bar is None:
        omega = omega_model_multinomial(beta, data, cfg)
    else:
        # multinomial Omega with the common size m_bar in place of each m_hi
        X, _, _, w = data.arrays()
        mm = np.full(data.n_clusters, float(m_bar))
        omega = _kernels.omega_model(beta, X, mm, w, _lam(cfg), np.ones(data.n_clusters))
        omega = omega / data.n_clusters
    omega_hat = omega_empirical(beta, data, cfg)
    inv, _ = inverse_psd(omega, "multinomial Omega")
    return float(np.trace(inv @ omega_hat)) / omega.shape[0]


def _pearson_sum(beta, data, m_bar):
    X, Y, _, _ = data.arrays()
    P = _kernels.probabilities(beta, X)
    bad = np.argwhere(P <= _kernels.PROB_FLOOR)
    if bad.size:
        keys = [(int(data.strata[i]), int(data.clusters[i]), int(j) + 1) for i, j in bad[:5]]
        raise NumericError(f"zero fitted probability at (stratum, cluster, category) {keys}")
    E = m_bar * P
    return float(np.sum((Y - E) ** 2 / E))


def _resolve_m_bar(data, m_bar):
    if m_bar is None:
        return common_cluster_size(data), None
    if m_bar <= 1:
        raise InputError("m_bar must exceed 1")
    return float(m_bar), float(m_bar)


def nu_estimating_equation(fit, data, cfg, m_bar=None):
    """``trace(Omega^-1 Omega_hat) / (d (k+1))`` at the fitted ``beta``.

    Cluster sizes must be equal unless ``m_bar`` is given explicitly; the
    model Omega then uses ``m_bar`` for every cluster.
    """
    m_bar, override = _resolve_m_bar(data, m_bar)
    nu = _nu_E(_beta(fit, data), data, cfg, override)
    return OverdispersionEstimate(nu, rho_squared_from_nu(nu, m_bar),
                                  Method.ESTIMATING_EQUATION, m_bar)


def nu_moments(fit, data, m_bar=None):
    """Pearson-type average ``(1/(n d)) sum (y - m pi)^2 / (m pi)``.

    An explicit ``m_bar`` replaces the equal-size requirement.
    """
    m_bar, _ = _resolve_m_bar(data, m_bar)
    d = data.num_categories - 1
    nu = _pearson_sum(_beta(fit, data), data, m_bar) / (data.n_clusters * d)
    return OverdispersionEstimate(nu, rho_squared_from_nu(nu, m_bar), Method.MOMENTS, m_bar)


def nu_per_stratum(fit, data, cfg, method="estimating_equation"):
    """One estimate per stratum, each with its own common cluster size."""
    method = Method(method)
    beta = _beta(fit, data)
    out = []
    for h in data.stratum_ids:
        sub = data.subset(data.strata == h)
        try:
            m_bar = common_cluster_size(sub)
        except InputError as exc:
            raise InputError(f"stratum {h}: {exc}") from None
        if method is Method.ESTIMATING_EQUATION:
            nu = _nu_E(beta, sub, cfg)
        else:
            nu = _pearson_sum(beta, sub, m_bar) / (sub.n_clusters * (data.num_categories - 1))
        out.append(OverdispersionEstimate(nu, rho_squared_from_nu(nu, m_bar), method, m_bar,
                                          stratum=int(h)))
    return out


def reduced_pearson_form(y, pi, m):
    """``(y* - m pi*)^T (m Delta(pi*))^-1 (y* - m pi*)`` over the first d categories.

    Equal to the full ``d+1``-term Pearson sum whenever ``sum(y) = m``.
    """
    y = np.asarray(y, dtype=float)
    pi = np.asarray(pi, dtype=float)
    r = y[:-1] - m * pi[:-1]
    ps = pi[:-1]
    D = m * (np.diag(ps) - np.outer(ps, ps))
    return float(r @ np.linalg.solve(D, r))
