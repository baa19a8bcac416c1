"""Psi / Omega matrices, the sandwich covariance and stratum-wise versions.

All matrices are averages of per-cluster terms. The default normaliser is
the number of clusters ``n``; ``normalization="unit"`` divides by the total
number of units instead. The sandwich ``q`` does not depend on that
choice.
"""
from dataclasses import dataclass
import enum
import logging

import numpy as np
import scipy.linalg

from . import _kernels
from .model import InputError, beta_for, delta_matrix
from .objective import _lam

logger = logging.getLogger(__name__)


class IdentifiabilityError(np.linalg.LinAlgError):
    def __init__(self, msg, null_space=None, condition_number=None):
        super().__init__(msg)
        self.null_space = null_space
        self.condition_number = condition_number


class OmegaVariant(str, enum.Enum):
    MULTINOMIAL = "multinomial"
    OVERDISPERSED = "overdispersed"
    EMPIRICAL = "empirical"


@dataclass(frozen=True, eq=False)
class CovarianceBundle:
    """Psi, one Omega estimate, and the sandwich ``q = (1/n) Psi^-1 Omega Psi^-1``.

    ``n`` is the normaliser used for ``psi`` and ``omega``; ``n * q`` is the
    asymptotic covariance of ``sqrt(n) (beta_hat - beta)``.
    """

    psi: np.ndarray
    omega: np.ndarray
    q: np.ndarray
    omega_variant: OmegaVariant
    n: float
    condition_number: float
    nu: object = None

    @property
    def asymptotic_cov(self):
        return self.n * self.q


def _normaliser(data, normalization):
    if normalization == "cluster":
        return float(data.n_clusters)
    if normalization == "unit":
        return float(data.unit_counts.sum())
    raise InputError(f"normalization must be 'cluster' or 'unit', got {normalization!r}")


def psi_sum(beta, data, cfg):
    """``sum_hi Psi_hi``: the expected negative Jacobian of ``u_lambda``."""
    X, Y, m, w = data.arrays()
    _, psi, _ = _kernels.accumulate(beta_for(data, beta), X, Y, m, w, _lam(cfg), True)
    return psi


def psi_matrix(beta, data, cfg, normalization="cluster"):
    return psi_sum(beta, data, cfg) / _normaliser(data, normalization)


def psi_matrix_lambda0_literal(beta, data, normalization="cluster"):
    """``(1/n) sum w m Delta(pi*) kron x x^T``; literal lambda = 0 expression."""
    b = beta_for(data, beta)
    X, _, m, w = data.arrays()
    P = _kernels.probabilities(b, X)
    out = 0.0
    for i in range(X.shape[0]):
        out = out + w[i] * m[i] * np.kron(delta_matrix(P[i, :-1]), np.outer(X[i], X[i]))
    return out / _normaliser(data, normalization)


def _nu_per_cluster(data, nu):
    nu_arr = np.broadcast_to(np.asarray(nu, dtype=float), (data.n_clusters,))
    if np.any(nu_arr < 0):
        raise InputError("overdispersion parameter must be nonnegative")
    return np.ascontiguousarray(nu_arr)


def omega_model_multinomial(beta, data, cfg, normalization="cluster"):
    """Omega with ``Sigma_hi = m_hi Delta(pi_hi)``."""
    X, _, m, w = data.arrays()
    ones = np.ones(data.n_clusters)
    S = _kernels.omega_model(beta_for(data, beta), X, m, w, _lam(cfg), ones)
    return S / _normaliser(data, normalization)


def omega_overdispersed(beta, data, cfg, nu, normalization="cluster"):
    """Omega with ``Sigma_hi = nu_hi m_hi Delta(pi_hi)``.

    ``nu`` may be a scalar, one value per cluster, or a mapping
    ``{stratum_id: nu_h}``.
    """
    if isinstance(nu, dict):
        missing = set(data.stratum_ids.tolist()) - set(nu)
        if missing:
            raise InputError(f"no overdispersion value for strata {sorted(missing)}")
        nu = np.array([nu[h] for h in data.strata.tolist()], dtype=float)
    X, _, m, w = data.arrays()
    S = _kernels.omega_model(beta_for(data, beta), X, m, w, _lam(cfg), _nu_per_cluster(data, nu))
    return S / _normaliser(data, normalization)


def omega_empirical(beta, data, cfg, normalization="cluster"):
    """Outer-product-of-scores estimate ``(1/n) sum U U^T``."""
    from .objective import cluster_scores

    U = cluster_scores(beta, data, cfg)
    return U.T @ U / _normaliser(data, normalization)


def _sym(a):
    return 0.5 * (a + a.T)


def inverse_psd(mat, what="matrix", rcond=1e-13):
    """Cholesky-based inverse that refuses singular input.

    Returns ``(inverse, condition_number)``.
    """
    mat = _sym(np.asarray(mat, dtype=float))
    evals, evecs = np.linalg.eigh(mat)
    top = max(abs(evals[-1]), np.finfo(float).tiny)
    cond = float(top / evals[0]) if evals[0] > 0 else np.inf
    if evals[0] <= rcond * top:
        null = evecs[:, evals <= rcond * top]
        raise IdentifiabilityError(
            f"{what} is singular (condition number {cond:.3g})",
            null_space=null, condition_number=cond,
        )
    c, low = scipy.linalg.cho_factor(mat)
    inv = scipy.linalg.cho_solve((c, low), np.eye(mat.shape[0]))
    return _sym(inv), cond


def sandwich(beta, data, cfg, variant="empirical", nu=None, normalization="cluster",
             pinv=False):
    """Sandwich covariance bundle ``q = (1/n) Psi^-1 Omega Psi^-1``.

    Parameters
    ----------
    variant : {"multinomial", "overdispersed", "empirical"}
    nu : scalar, array or dict, required for ``"overdispersed"``
    pinv : bool
        Use a pseudo-inverse instead of failing on a singular Psi.
    """
    variant = OmegaVariant(variant)
    psi = psi_matrix(beta, data, cfg, normalization)
    if variant is OmegaVariant.MULTINOMIAL:
        omega = omega_model_multinomial(beta, data, cfg, normalization)
    elif variant is OmegaVariant.OVERDISPERSED:
        if nu is None:
            raise InputError("the overdispersed variant needs nu")
        omega = omega_overdispersed(beta, data, cfg, nu, normalization)
    else:
        omega = omega_empirical(beta, data, cfg, normalization)
    n = _normaliser(data, normalization)
    try:
        psi_inv, cond = inverse_psd(psi, "Psi")
    except IdentifiabilityError:
        if not pinv:
            raise
        logger.warning("Psi is singular; using pseudo-inverse as requested")
        psi_inv, cond = np.linalg.pinv(psi, hermitian=True), np.inf
    q = _sym(psi_inv @ omega @ psi_inv) / n
    return CovarianceBundle(psi=psi, omega=omega, q=q, omega_variant=variant, n=n,
                            condition_number=cond, nu=nu)


@dataclass(frozen=True, eq=False)
class StratumMatrices:
    stratum_id: int
    n_h: int
    psi: np.ndarray
    omega: np.ndarray
    omega_hat: np.ndarray


def stratumwise_matrices(beta, data, cfg):
    """Per-stratum averages ``(1/n_h) sum_i`` of the Psi, Omega, Omega-hat terms.

    Returns ``(list_of_StratumMatrices, eta)`` with ``eta_h = n_h / n``;
    ``sum_h eta_h M^(h)`` recovers the pooled matrices.
    """
    out = []
    for h in data.stratum_ids:
        sub = data.subset(data.strata == h)
        if sub.n_clusters == 0:
            raise InputError(f"stratum {h} is empty")
        out.append(StratumMatrices(
            stratum_id=int(h), n_h=sub.n_clusters,
            psi=psi_matrix(beta, sub, cfg),
            omega=omega_model_multinomial(beta, sub, cfg),
            omega_hat=omega_empirical(beta, sub, cfg),
        ))
    eta = np.array([s.n_h for s in out], dtype=float) / data.n_clusters
    return out, eta


def _jacobian_middle(P, G, lam):
    """Per-cluster ``d a / d eta`` (n, d, d), divided by m.

    ``a = Delta* diag^(lam-1)(pi) (g - pi)`` has entries ``z_r - pi_r s`` with
    ``z = pi^lam (g - pi)`` and ``s = sum(z)``. With
    ``c_l = pi_l dz_l/dpi_l = lam pi_l^lam v_l - pi_l^(lam+1)`` and
    ``E_qr = delta_qr - pi_q`` the chain rule through ``dpi_l/deta_q =
    pi_l E_ql`` gives ``(c_r - s pi_r) E_qr - pi_r (c_q - pi_q sum(c))``.
    """
    d = P.shape[1] - 1
    V = G - P
    pl = P**lam if lam != 0.0 else np.ones_like(P)
    c = lam * pl * V - pl * P
    s = np.sum(pl * V, axis=1)
    E = -np.broadcast_to(P[:, :d, None], (P.shape[0], d, d)).copy()  # E[n, q, r]
    idx = np.arange(d)
    E[:, idx, idx] += 1.0
    first = (c[:, :d] - s[:, None] * P[:, :d])[:, :, None] * np.transpose(E, (0, 2, 1))
    second = P[:, :d, None] * (c[:, :d] - P[:, :d] * c.sum(axis=1, keepdims=True))[:, None, :]
    return first - second


def observed_information(beta, data, cfg, targets=None, normalization="cluster"):
    """Negative average Jacobian ``-(1/n) sum d u_hi / d beta``.

    ``targets`` holds one probability vector per cluster (the ``g`` the
    scores are centred on); the default is the observed proportions
    ``y_hi / m_hi``, giving the Hessian of the fitted objective up to the
    factor ``lambda + 1``. With ``targets = pi(beta)`` this equals Psi.
    """
    b = beta_for(data, beta)
    X, Y, m, w = data.arrays()
    P = _kernels.probabilities(b, X)
    G = Y / m[:, None] if targets is None else np.asarray(targets, dtype=float)
    if G.shape != P.shape:
        raise InputError(f"targets must have shape {P.shape}")
    J = _jacobian_middle(P, G, _lam(cfg))
    return -_kernels._kron_sum(w * m, J, X) / _normaliser(data, normalization)
