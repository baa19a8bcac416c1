"""Fisher-scoring fit of the minimum quasi weighted DPD estimator."""
from dataclasses import dataclass, field
import logging
import warnings

import numpy as np
import scipy.linalg

from . import _kernels
from .asymptotics import IdentifiabilityError, observed_information
from .model import InputError, as_beta
from .objective import DpdConfig, _lam

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 30.0


class DivergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Stopping rules and start for :func:`fit`.

    ``gradient_tolerance`` bounds the sup-norm of the estimating function;
    ``step_tolerance`` stops the iteration when the accepted step is
    smaller than this in sup-norm (the fit is then reported as not
    converged unless the gradient test also holds).
    """

    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-12
    initial_beta: object = None
    method: str = "fisher"
    n_starts: int = 1
    start_seed: int = 0
    start_scale: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if not (self.gradient_tolerance > 0 and self.step_tolerance > 0):
            raise InputError("tolerances must be positive")
        if self.method not in ("fisher", "newton"):
            raise InputError("method must be 'fisher' or 'newton'")
        if self.n_starts < 1:
            raise InputError("n_starts must be >= 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    beta_hat: np.ndarray
    lam: float
    converged: bool
    iterations: int
    final_gradient_norm: float
    objective_value: float
    n_dropped: int = 0
    warnings: tuple = field(default_factory=tuple)

    @property
    def beta_flat(self):
        return self.beta_hat.reshape(-1)

    def to_dict(self):
        return {
            "beta_hat": self.beta_hat.tolist(),
            "lambda": self.lam,
            "converged": self.converged,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "objective_value": self.objective_value,
            "n_dropped": self.n_dropped,
            "warnings": list(self.warnings),
        }


def check_design_rank(X, tol=None):
    """Raise :class:`IdentifiabilityError` naming dependent covariate columns."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise InputError("no clusters with positive weight and unit count")
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if tol is None:
        tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        dependent = sorted(int(c) for c in piv[rank:])
        raise IdentifiabilityError(
            f"covariate matrix has rank {rank} < {X.shape[1]}; "
            f"dependent columns (0-based): {dependent}",
        )
    return rank


def _usable(data):
    keep = (data.unit_counts > 0) & (data.weights > 0)
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        logger.info("dropping %d clusters with zero weight or zero units", dropped)
        data = data.subset(keep)
    return data, dropped


def _single_fit(data, lam, cfg, beta0):
    X, Y, m, w = data.arrays()
    beta = beta0.copy()
    shape = beta.shape
    tol = cfg.gradient_tolerance
    # objective gradient is -(lam + 1) u at lam > 0 and -u at lam = 0
    gscale = 1.0 if lam == 0.0 else lam + 1.0
    u, psi, obj = _kernels.accumulate(beta, X, Y, m, w, lam, True)
    gnorm = float(np.max(np.abs(u)))
    it = 0
    converged = gnorm <= tol
    notes = []
    while not converged and it < cfg.max_iterations:
        it += 1
        H = psi
        if cfg.method == "newton":
            H = observed_information(beta, data, lam, normalization="cluster") * data.n_clusters
        try:
            c, low = scipy.linalg.cho_factor(0.5 * (H + H.T))
            step = scipy.linalg.cho_solve((c, low), u)
        except np.linalg.LinAlgError:
            step = u / max(1.0, float(np.max(np.abs(u))))
            if not notes or notes[-1] != "gradient-fallback":
                notes.append("gradient-fallback")
        slope = -gscale * float(u @ step)
        if slope >= 0:  # not a descent direction; use the gradient itself
            step = u.copy()
            slope = -gscale * float(u @ u)
        if abs(slope) < 1e-10 * max(1.0, abs(obj)):
            # predicted decrease is below the objective's rounding level, so
            # the line search cannot discriminate; judge the step by |u| instead
            trial = beta + step.reshape(shape)
            u_try, psi_try, obj_try = _kernels.accumulate(trial, X, Y, m, w, lam, True)
            g_try = float(np.max(np.abs(u_try)))
            if g_try < gnorm:
                beta, u, psi, obj, gnorm = trial, u_try, psi_try, obj_try, g_try
                converged = gnorm <= tol
                continue
        t = 1.0
        accepted = False
        for _ in range(60):
            trial = beta + t * step.reshape(shape)
            f_new = _kernels.objective(trial, X, Y, m, w, lam)
            if np.isfinite(f_new) and f_new <= obj + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        move = t * float(np.max(np.abs(step)))
        if not accepted:
            # the objective is flat to rounding; accept the full step only
            # if it still reduces the estimating-function residual
            trial = beta + step.reshape(shape)
            u_try, psi_try, obj_try = _kernels.accumulate(trial, X, Y, m, w, lam, True)
            if float(np.max(np.abs(u_try))) < gnorm:
                beta, u, psi, obj = trial, u_try, psi_try, obj_try
                gnorm = float(np.max(np.abs(u)))
                converged = gnorm <= tol
                continue
            notes.append("line-search-failed")
            break
        beta = trial
        u, psi, obj = _kernels.accumulate(beta, X, Y, m, w, lam, True)
        gnorm = float(np.max(np.abs(u)))
        converged = gnorm <= tol
        if not converged and move < cfg.step_tolerance:
            notes.append("step-tolerance")
            break
    return beta, converged, it, gnorm, float(obj), notes


def fit(data, dpd=None, cfg=None):
    """Minimum quasi weighted DPD estimate of ``beta``.

    Parameters
    ----------
    data : SurveyDataset
    dpd : DpdConfig or float, optional
        Tuning parameter; ``0`` (default) gives the quasi weighted
        maximum likelihood estimate.
    cfg : FitConfig, optional

    Returns
    -------
    FitResult
        ``converged`` is true only when ``max |u_lambda(beta_hat)|`` is at
        most ``cfg.gradient_tolerance``.
    """
    cfg = cfg or FitConfig()
    lam = _lam(dpd if dpd is not None else DpdConfig())
    data, dropped = _usable(data)
    check_design_rank(data.covariates)
    d, q = data.num_categories - 1, data.num_covariates
    if cfg.initial_beta is None:
        start = np.zeros((d, q))
    else:
        start = as_beta(cfg.initial_beta, data.num_categories, q).copy()

    starts = [start]
    if cfg.n_starts > 1:
        rng = np.random.default_rng(cfg.start_seed)
        starts += [start + cfg.start_scale * rng.standard_normal(start.shape)
                   for _ in range(cfg.n_starts - 1)]

    best = None
    for b0 in starts:
        res = _single_fit(data, lam, cfg, b0)
        if best is None:
            best = res
            continue
        # prefer converged runs, then the smaller objective
        if (res[1], -res[4]) > (best[1], -best[4]):
            best = res
    beta, converged, it, gnorm, obj, notes = best

    if np.linalg.norm(beta) > DIVERGENCE_NORM:
        msg = (f"||beta|| = {np.linalg.norm(beta):.3g} exceeds {DIVERGENCE_NORM:g}; "
               "fitted probabilities are approaching 0 or 1 (possible separation)")
        warnings.warn(msg, DivergenceWarning, stacklevel=2)
        notes.append("divergence")
    if not converged:
        logger.warning("fit at lambda=%g did not converge (|u|_inf = %.3g after %d iterations)",
                       lam, gnorm, it)
    return FitResult(
        beta_hat=beta, lam=lam, converged=converged, iterations=it,
        final_gradient_norm=gnorm, objective_value=obj, n_dropped=dropped,
        warnings=tuple(notes),
    )
