"""Survey data model and the polytomous logistic probability map."""
from dataclasses import dataclass, field
import logging

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)


class InputError(ValueError):
    """Malformed or dimensionally inconsistent input."""


@dataclass(frozen=True)
class ClusterRecord:
    stratum_id: int
    cluster_id: int
    weight: float
    unit_count: int
    counts: tuple
    covariates: tuple

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if np.any(counts < 0):
            raise InputError(f"negative counts in cluster {self.key}")
        if int(counts.sum()) != int(self.unit_count):
            raise InputError(
                f"cluster {self.key}: counts sum to {int(counts.sum())}, "
                f"unit_count is {self.unit_count}"
            )
        if self.weight < 0:
            raise InputError(f"negative weight in cluster {self.key}")

    @property
    def key(self):
        return (self.stratum_id, self.cluster_id)


def _frozen(a, dtype=float):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurveyDataset:
    """Stratified, clustered sample of aggregated categorical responses.

    Parameters
    ----------
    strata, clusters : (n,) int arrays
        Stratum and within-stratum cluster labels; pairs must be unique.
    weights : (n,) array
        Sampling weights ``w_hi``.
    counts : (n, d+1) array
        Per-category totals; ``unit_counts`` is their row sum.
    covariates : (n, k+1) array
        Cluster-level covariates. With ``intercept=True`` the first column
        must be identically 1.
    intercept : bool
        Whether column 0 is an intercept. Dummy codings such as
        ``(1, 0)`` / ``(0, 1)`` need ``intercept=False``.
    """

    strata: np.ndarray
    clusters: np.ndarray
    weights: np.ndarray
    counts: np.ndarray
    covariates: np.ndarray
    intercept: bool = True
    unit_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "strata", _frozen(self.strata, np.int64))
        set_(self, "clusters", _frozen(self.clusters, np.int64))
        set_(self, "weights", _frozen(self.weights))
        set_(self, "counts", _frozen(np.atleast_2d(self.counts)))
        set_(self, "covariates", _frozen(np.atleast_2d(self.covariates)))
        n = self.counts.shape[0]
        for name in ("strata", "clusters", "weights"):
            if getattr(self, name).shape != (n,):
                raise InputError(f"{name} must have shape ({n},)")
        if self.covariates.shape[0] != n:
            raise InputError("covariates and counts disagree on the number of clusters")
        if self.counts.shape[1] < 2:
            raise InputError("need at least two response categories")
        if np.any(self.counts < 0):
            bad = np.flatnonzero(np.any(self.counts < 0, axis=1))
            raise InputError(f"negative counts in clusters at rows {bad.tolist()}")
        if np.any(np.round(self.counts) != self.counts):
            raise InputError("counts must be integers")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InputError("weights must be finite and nonnegative")
        if not np.all(np.isfinite(self.covariates)):
            raise InputError("covariates must be finite")
        if self.intercept and not np.all(self.covariates[:, 0] == 1.0):
            raise InputError("first covariate column must be 1 (intercept)")
        keys = set(zip(self.strata.tolist(), self.clusters.tolist()))
        if len(keys) != n:
            raise InputError("(stratum, cluster) pairs must be unique")
        set_(self, "unit_counts", _frozen(self.counts.sum(axis=1)))

    @classmethod
    def from_records(cls, records, intercept=True):
        records = list(records)
        if not records:
            raise InputError("no clusters")
        return cls(
            strata=[r.stratum_id for r in records],
            clusters=[r.cluster_id for r in records],
            weights=[r.weight for r in records],
            counts=[list(r.counts) for r in records],
            covariates=[list(r.covariates) for r in records],
            intercept=intercept,
        )

    def records(self):
        return [
            ClusterRecord(
                int(h), int(i), float(w), int(m), tuple(int(c) for c in y), tuple(x)
            )
            for h, i, w, m, y, x in zip(
                self.strata, self.clusters, self.weights, self.unit_counts,
                self.counts, self.covariates,
            )
        ]

    @property
    def n_clusters(self):
        return self.counts.shape[0]

    @property
    def num_categories(self):
        return self.counts.shape[1]

    @property
    def num_covariates(self):
        return self.covariates.shape[1]

    @property
    def n_params(self):
        return (self.num_categories - 1) * self.num_covariates

    @property
    def stratum_ids(self):
        return np.unique(self.strata)

    def subset(self, mask):
        mask = np.asarray(mask)
        return SurveyDataset(
            self.strata[mask], self.clusters[mask], self.weights[mask],
            self.counts[mask], self.covariates[mask], intercept=self.intercept,
        )

    def with_counts(self, counts):
        return SurveyDataset(
            self.strata, self.clusters, self.weights, counts, self.covariates,
            intercept=self.intercept,
        )

    def with_weights(self, weights):
        return SurveyDataset(
            self.strata, self.clusters, weights, self.counts, self.covariates,
            intercept=self.intercept,
        )

    def with_covariates(self, covariates):
        return SurveyDataset(
            self.strata, self.clusters, self.weights, self.counts, covariates,
            intercept=self.intercept,
        )

    def arrays(self):
        """Contiguous float arrays ``(X, Y, m, w)`` for the kernels."""
        return (
            self.covariates,
            np.ascontiguousarray(self.counts, dtype=float),
            np.ascontiguousarray(self.unit_counts, dtype=float),
            self.weights,
        )


def as_beta(beta, num_categories=None, num_covariates=None):
    """Coerce a flat or (d, k+1) coefficient array to shape (d, k+1)."""
    b = np.asarray(beta, dtype=float)
    if b.ndim == 1:
        if num_categories is None and num_covariates is None:
            raise InputError("flat beta needs the model dimensions")
        q = num_covariates if num_covariates is not None else b.size // (num_categories - 1)
        if b.size % q:
            raise InputError(f"beta of length {b.size} does not split into blocks of {q}")
        b = b.reshape(-1, q)
    if b.ndim != 2:
        raise InputError("beta must be a matrix of shape (d, k+1)")
    if num_categories is not None and b.shape[0] != num_categories - 1:
        raise InputError(f"beta has {b.shape[0]} rows, expected {num_categories - 1}")
    if num_covariates is not None and b.shape[1] != num_covariates:
        raise InputError(f"beta has {b.shape[1]} columns, expected {num_covariates}")
    if not np.all(np.isfinite(b)):
        raise InputError("beta must be finite")
    return np.ascontiguousarray(b)


def beta_for(data, beta):
    return as_beta(beta, data.num_categories, data.num_covariates)


def model_probabilities(beta, x):
    """Category probabilities at a covariate vector, last category as reference.

    The linear predictors are shifted by their maximum before
    exponentiation, so large ``|x^T beta_r|`` does not overflow.
    """
    b = as_beta(beta)
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != b.shape[1]:
        raise InputError(f"x must have length {b.shape[1]}")
    eta = np.append(b @ x, 0.0)
    eta -= eta.max()
    e = np.exp(eta)
    pi = e / e.sum()
    if np.any(pi < _kernels.PROB_FLOOR):
        logger.warning("clipping %d probabilities at %g", int(np.sum(pi < _kernels.PROB_FLOOR)),
                       _kernels.PROB_FLOOR)
        pi = np.maximum(pi, _kernels.PROB_FLOOR)
    return pi


def dataset_probabilities(beta, data):
    """(n, d+1) matrix of fitted probabilities for every cluster."""
    X = data.covariates
    return _kernels.probabilities(beta_for(data, beta), X)


def delta_matrix(pi):
    """``diag(pi) - pi pi^T``."""
    pi = np.asarray(pi, dtype=float)
    return np.diag(pi) - np.outer(pi, pi)


def delta_star(pi):
    """``(I_d, 0) Delta(pi)``: the first d rows of :func:`delta_matrix`."""
    return delta_matrix(pi)[:-1]


def probability_jacobian(beta, x):
    """``d pi^T / d beta = Delta*(pi) kron x``, shape (d(k+1), d+1)."""
    x = np.asarray(x, dtype=float)
    Ds = delta_star(model_probabilities(beta, x))
    # rows r*q + s: Ds[r, :] * x[s]
    return (Ds[:, None, :] * x[None, :, None]).reshape(-1, Ds.shape[1])
