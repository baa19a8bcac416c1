"""Overdispersed multinomial samplers and the Monte Carlo study harness.

Randomness
----------
Every replication owns a ``numpy.random.SeedSequence([seed, replication])``
which is spawned into three independent children, used for covariates,
counts and contamination respectively. Results therefore do not depend on
execution order or on how replications are split across workers.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import csv
import enum
import io
import json
import logging
import math
import os

import numpy as np

from . import _kernels
from .asymptotics import IdentifiabilityError, sandwich
from .fitting import FitConfig, fit
from .inference import LinearHypothesis, wald_statistic
from .model import InputError, SurveyDataset, as_beta
from .overdispersion import nu_estimating_equation, nu_moments

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "SURVEY_DPD_WORKERS"
SCENARIO_BETA = ((0.0, -0.9, 0.1), (0.6, -1.2, 0.8))
DEFAULT_CYCLE = (2, 0, 1)  # old category index -> new category index


class Distribution(str, enum.Enum):
    MULTINOMIAL = "multinomial"
    RANDOM_CLUMPED = "random_clumped"
    M_INFLATED = "m_inflated"
    DIRICHLET_MULTINOMIAL = "dirichlet_multinomial"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"mult": "multinomial", "rc": "random_clumped", "mi": "m_inflated",
                   "m_i": "m_inflated", "dm": "dirichlet_multinomial"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(d.value for d in cls) + " (aliases: rc, mi, dm)"
            raise InputError(f"unknown distribution {name!r}; valid names: {valid}") from None


def overdispersion_factor(rho_squared, m):
    return 1.0 + rho_squared * (m - 1)


@dataclass(frozen=True)
class SamplerConfig:
    distribution: Distribution
    rho_squared: float
    m: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution.parse(self.distribution))
        _check_sampler(self.distribution, self.rho_squared, self.m)


def _check_sampler(dist, rho2, m):
    if not 0.0 <= rho2 < 1.0:
        raise InputError(f"rho_squared must lie in [0, 1), got {rho2}")
    if int(m) != m or m < 1:
        raise InputError("m must be a positive integer")


def _categorical(P, rng):
    u = rng.random(P.shape[0])
    cum = np.cumsum(P, axis=1)
    z = (u[:, None] > cum).sum(axis=1)
    return np.minimum(z, P.shape[1] - 1)


def _multinomial(m, P, rng):
    P = P / P.sum(axis=1, keepdims=True)
    return rng.multinomial(m, P)


def sample_counts(P, m, distribution, rho_squared, rng):
    """Draw one count vector per row of ``P`` (n, K); each row sums to ``m``.

    Mean ``m pi`` and covariance ``(1 + rho^2 (m-1)) m Delta(pi)`` for all
    three overdispersed families; ``rho_squared == 0`` is plain multinomial.
    """
    dist = Distribution.parse(distribution)
    _check_sampler(dist, rho_squared, m)
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n, K = P.shape
    m = int(m)
    if rho_squared == 0.0 or dist is Distribution.MULTINOMIAL:
        return _multinomial(m, P, rng)
    if dist is Distribution.RANDOM_CLUMPED:
        N = rng.binomial(m, math.sqrt(rho_squared), size=n)
        Z = _categorical(P, rng)
        out = _multinomial(m - N, P, rng)
        out[np.arange(n), Z] += N
        return out
    if dist is Distribution.M_INFLATED:
        clump = rng.random(n) < rho_squared
        Z = _categorical(P, rng)
        out = _multinomial(m, P, rng)
        out[clump] = 0
        out[np.flatnonzero(clump), Z[clump]] = m
        return out
    c = (1.0 - rho_squared) / rho_squared
    G = rng.standard_gamma(c * P)
    tot = G.sum(axis=1)
    bad = np.flatnonzero(tot <= 0)
    while bad.size:  # all-zero gamma draws underflow at tiny c * pi
        G[bad] = rng.standard_gamma(c * P[bad])
        tot[bad] = G[bad].sum(axis=1)
        bad = bad[tot[bad] <= 0]
    return _multinomial(m, G / tot[:, None], rng)


def sample_cluster(pi, cfg, stream):
    """One cluster's count vector for ``SamplerConfig`` ``cfg``."""
    return sample_counts(np.asarray(pi)[None, :], cfg.m, cfg.distribution,
                         cfg.rho_squared, stream)[0]


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design; ``n_per_stratum`` clusters in each of ``H`` strata."""

    H: int = 2
    n_per_stratum: int = 60
    m: int = 21
    rho_squared: float = 0.25
    distribution: Distribution = Distribution.RANDOM_CLUMPED
    beta_true: tuple = SCENARIO_BETA
    contamination_rate: float = 0.0
    replications: int = 200
    lambda_grid: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    seed: int = 20240101
    name: str = "scenario"

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "distribution", Distribution.parse(self.distribution))
        b = as_beta(self.beta_true)
        set_(self, "beta_true", tuple(tuple(float(v) for v in row) for row in b))
        set_(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.H < 1 or self.n_per_stratum < 1:
            raise InputError("H and n_per_stratum must be positive")
        if not 0.0 <= self.contamination_rate < 1.0:
            raise InputError("contamination_rate must lie in [0, 1)")
        if self.replications < 0:
            raise InputError("replications must be nonnegative")
        if any(v < 0 for v in self.lambda_grid):
            raise InputError("lambda values must be nonnegative")
        _check_sampler(self.distribution, self.rho_squared, self.m)

    @property
    def beta(self):
        return np.array(self.beta_true)

    @property
    def n_clusters(self):
        return self.H * self.n_per_stratum

    def to_json(self):
        d = asdict(self)
        d["distribution"] = self.distribution.value
        d["beta_true"] = [list(r) for r in self.beta_true]
        d["lambda_grid"] = list(self.lambda_grid)
        d["schema_version"] = SCHEMA_VERSION
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"scenario is not valid JSON: {exc}") from None
        d.pop("schema_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown scenario fields {sorted(unknown)}")
        return cls(**d)


def scenario_1(**overrides):
    """H=2, m=21, rho^2=0.25, random-clumped counts."""
    return replace(ScenarioSpec(name="scenario_1"), **overrides)


def replication_streams(spec, replication):
    """``(covariates, counts, contamination)`` generators for one replication."""
    ss = np.random.SeedSequence([int(spec.seed), int(replication)])
    return tuple(np.random.default_rng(c) for c in ss.spawn(3))


def generate_scenario(spec, replication, beta=None):
    """Simulated dataset for one replication, with ``x = (1, z)``, ``z ~ N(0, I)``.

    ``beta`` overrides the generating coefficients (used for power studies);
    the covariates depend only on ``(seed, replication)``.
    """
    b = spec.beta if beta is None else as_beta(beta, spec.beta.shape[0] + 1,
                                               spec.beta.shape[1])
    g_x, g_y, _ = replication_streams(spec, replication)
    n = spec.n_clusters
    k = b.shape[1] - 1
    X = np.empty((n, k + 1))
    X[:, 0] = 1.0
    X[:, 1:] = g_x.standard_normal((n, k))
    P = _kernels.probabilities(np.ascontiguousarray(b), X)
    Y = sample_counts(P, spec.m, spec.distribution, spec.rho_squared, g_y)
    strata = np.repeat(np.arange(1, spec.H + 1), spec.n_per_stratum)
    clusters = np.tile(np.arange(1, spec.n_per_stratum + 1), spec.H)
    return SurveyDataset(strata, clusters, np.ones(n), Y, X)


def n_contaminated(rate, n):
    # guard against 0.07 * 100 = 7.000000000000001
    return int(math.ceil(round(rate * n, 9)))


def contaminate(data, rate, stream, permutation=None):
    """Relabel categories of a random ``ceil(rate * n)`` subset of clusters.

    ``permutation[r]`` is the new index of old category ``r`` (0-based). The
    default sends categories 1, 2, 3 to 3, 1, 2.
    """
    if not 0.0 <= rate < 1.0:
        raise InputError("rate must lie in [0, 1)")
    K = data.num_categories
    if permutation is None:
        if K != 3:
            raise InputError("the default cyclic relabelling needs 3 categories; "
                             "pass an explicit permutation")
        permutation = DEFAULT_CYCLE
    perm = np.asarray(permutation, dtype=int)
    if sorted(perm.tolist()) != list(range(K)):
        raise InputError(f"permutation must rearrange 0..{K - 1}")
    k = n_contaminated(rate, data.n_clusters)
    if k == 0:
        return data
    rows = np.sort(stream.choice(data.n_clusters, size=k, replace=False))
    Y = np.array(data.counts)
    new = np.empty_like(Y[rows])
    new[:, perm] = Y[rows]
    Y[rows] = new
    return data.with_counts(Y)


def replication_dataset(spec, replication, beta=None):
    data = generate_scenario(spec, replication, beta)
    if spec.contamination_rate > 0:
        _, _, g_c = replication_streams(spec, replication)
        data = contaminate(data, spec.contamination_rate, g_c)
    return data


# ------------------------------------------------------------------ studies


@dataclass
class StudyTable:
    """Rows of ``{scenario, axis, lambda, metric, value, ...}`` plus a summary."""

    rows: list
    summary: dict = field(default_factory=dict)

    FIELDS = ("scenario", "axis", "axis_value", "lambda", "metric", "value",
              "std_error", "n_used", "n_excluded")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in self.FIELDS})
        return buf.getvalue()

    def value(self, metric, lam):
        for r in self.rows:
            if r["metric"] == metric and r["lambda"] == lam:
                return r["value"]
        raise KeyError((metric, lam))


def _fmt(v):
    if isinstance(v, float):
        return repr(float(f"{v:.17g}"))
    return v


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def _map(fn, args, workers):
    workers = _workers(workers)
    if workers == 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, args, chunksize=max(1, len(args) // (4 * workers))))


def _rmse_replication(job):
    spec, rep, fit_cfg = job
    data = replication_dataset(spec, rep)
    beta = spec.beta
    out = []
    for lam in spec.lambda_grid:
        try:
            res = fit(data, lam, fit_cfg)
        except IdentifiabilityError:
            out.append(None)
            continue
        if not res.converged:
            out.append(None)
            continue
        err = res.beta_hat - beta
        rE = nu_estimating_equation(res, data, lam).rho_squared
        rM = nu_moments(res, data).rho_squared
        out.append((float(np.sum(err**2)), rE, rM))
    return out


def run_rmse_study(spec, fit_cfg=None, workers=None, axis="n_per_stratum"):
    """RMSE of ``beta_hat`` and of both ``rho^2`` estimators per lambda.

    RMSE of beta is ``sqrt(mean over replications of |beta_hat - beta|^2 / p)``.
    Non-converged fits are excluded and counted.
    """
    if spec.replications == 0:
        raise InputError("zero replications: the study table would be empty")
    fit_cfg = fit_cfg or FitConfig()
    jobs = [(spec, r, fit_cfg) for r in range(spec.replications)]
    results = _map(_rmse_replication, jobs, workers)
    p = spec.beta.size
    rows = []
    axis_value = getattr(spec, axis)
    for j, lam in enumerate(spec.lambda_grid):
        ok = [r[j] for r in results if r[j] is not None]
        excluded = spec.replications - len(ok)
        if not ok:
            logger.warning("no converged fits at lambda=%g", lam)
            continue
        sq = np.array([o[0] for o in ok]) / p
        rE = np.array([o[1] for o in ok]) - spec.rho_squared
        rM = np.array([o[2] for o in ok]) - spec.rho_squared
        for metric, vals in (("rmse_beta", sq), ("rmse_rho2_E", rE**2), ("rmse_rho2_M", rM**2)):
            rmse = math.sqrt(float(np.mean(vals)))
            # delta-method standard error of sqrt(mean)
            se = float(np.std(vals, ddof=1) / math.sqrt(len(vals)) / (2 * rmse)) \
                if len(vals) > 1 and rmse > 0 else float("nan")
            rows.append(dict(scenario=spec.name, axis=axis, axis_value=axis_value, **{"lambda": lam},
                             metric=metric, value=rmse, std_error=se, n_used=len(ok),
                             n_excluded=excluded))
        rows.append(dict(scenario=spec.name, axis=axis, axis_value=axis_value, **{"lambda": lam},
                         metric="mean_rho2_E", value=float(np.mean(rE) + spec.rho_squared),
                         std_error=float(np.std(rE, ddof=1) / math.sqrt(len(rE)))
                         if len(rE) > 1 else float("nan"),
                         n_used=len(ok), n_excluded=excluded))
    summary = {"schema_version": SCHEMA_VERSION, "study": "rmse", "scenario": json.loads(spec.to_json()),
               "excluded": {str(l): sum(1 for r in results if r[j] is None)
                            for j, l in enumerate(spec.lambda_grid)}}
    return StudyTable(rows, summary)


def _wald_replication(job):
    spec, rep, beta, hyp, alpha, variant, fit_cfg = job
    data = replication_dataset(spec, rep, beta)
    out = []
    for lam in spec.lambda_grid:
        try:
            res = fit(data, lam, fit_cfg)
            if not res.converged:
                out.append(None)
                continue
            bundle = sandwich(res.beta_hat, data, lam, variant=variant)
            out.append(wald_statistic(res, bundle, hyp, alpha).statistic)
        except (IdentifiabilityError, np.linalg.LinAlgError):
            out.append(None)
    return out


def wald_statistics(spec, hyp, beta=None, alpha=0.05, variant="empirical", fit_cfg=None,
                    workers=None):
    """Array (replications, len(lambda_grid)) of Wald statistics; NaN if excluded."""
    fit_cfg = fit_cfg or FitConfig()
    jobs = [(spec, r, beta, hyp, alpha, variant, fit_cfg) for r in range(spec.replications)]
    res = _map(_wald_replication, jobs, workers)
    return np.array([[np.nan if v is None else v for v in row] for row in res], dtype=float)


def run_level_power_study(spec, hyp, beta_alt, alpha=0.05, variant="empirical", fit_cfg=None,
                          workers=None):
    """Empirical rejection rates at ``spec.beta_true`` (level) and ``beta_alt`` (power)."""
    if spec.replications == 0:
        raise InputError("zero replications: the study table would be empty")
    from .inference import chi_square_quantile

    crit = chi_square_quantile(hyp.r, alpha)
    rows = []
    for metric, beta in (("level", None), ("power", beta_alt)):
        W = wald_statistics(spec, hyp, beta, alpha, variant, fit_cfg, workers)
        for j, lam in enumerate(spec.lambda_grid):
            col = W[:, j]
            col = col[np.isfinite(col)]
            if col.size == 0:
                continue
            rate = float(np.mean(col > crit))
            rows.append(dict(scenario=spec.name, axis="n_per_stratum",
                             axis_value=spec.n_per_stratum, **{"lambda": lam}, metric=metric,
                             value=rate, std_error=math.sqrt(rate * (1 - rate) / col.size),
                             n_used=int(col.size), n_excluded=int(spec.replications - col.size)))
    summary = {"schema_version": SCHEMA_VERSION, "study": "levelpower",
               "scenario": json.loads(spec.to_json()), "alpha": alpha, "omega": variant,
               "hypothesis": json.loads(hyp.to_json(alpha)),
               "beta_alt": np.asarray(beta_alt, dtype=float).tolist()}
    return StudyTable(rows, summary)


def beta02_hypothesis(spec, value=0.6):
    """``H0: beta_02 = value``: intercept of the second category."""
    q = spec.beta.shape[1]
    return LinearHypothesis.single(spec.beta.size, 1 * q + 0, value)
