"""Bundled BMI dataset, its category-swap contaminations and deviation tables."""
from importlib import resources

import numpy as np

from .fitting import FitConfig, fit
from .io import read_dataset
from .model import InputError
from .overdispersion import nu_estimating_equation, nu_moments
from .robustness import asd, masd_beta, masd_pi

BMI_LAMBDAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
SEX_CLUSTER = {"men": 1, "women": 2}
BUILTIN = ("bmi", "bmi-men45", "bmi-women45")


def load_bmi():
    """Six clusters (sex within three age strata), three BMI categories."""
    with resources.as_file(resources.files(__package__) / "data" / "bmi.csv") as p:
        return read_dataset(p)


def swap_categories(data, stratum, cluster, a, b):
    """Exchange the counts of 1-based categories ``a`` and ``b`` in one cluster."""
    rows = np.flatnonzero((data.strata == stratum) & (data.clusters == cluster))
    if rows.size != 1:
        raise InputError(f"cluster ({stratum}, {cluster}) not found")
    Y = np.array(data.counts)
    r = rows[0]
    Y[r, [a - 1, b - 1]] = Y[r, [b - 1, a - 1]]
    return data.with_counts(Y)


def bmi_contaminated(sex):
    """BMI data with overweight and obese counts exchanged for ages 45-64."""
    try:
        cluster = SEX_CLUSTER[sex]
    except KeyError:
        raise InputError(f"sex must be one of {sorted(SEX_CLUSTER)}") from None
    return swap_categories(load_bmi(), 3, cluster, 2, 3)


def load_builtin(name):
    if name == "bmi":
        return load_bmi()
    if name == "bmi-men45":
        return bmi_contaminated("men")
    if name == "bmi-women45":
        return bmi_contaminated("women")
    raise InputError(f"unknown builtin dataset {name!r}; choose from {BUILTIN}")


def _rho2(res, data, lam):
    m_bar = float(np.mean(data.unit_counts))
    return (nu_estimating_equation(res, data, lam, m_bar=m_bar).rho_squared,
            nu_moments(res, data, m_bar=m_bar).rho_squared)


def bmi_deviation_table(sex, lambdas=BMI_LAMBDAS, fit_cfg=None):
    """Deviations between fits on the clean and contaminated BMI data.

    Returns one dict per lambda with ``masd_beta``, ``masd_pi``, and the
    absolute standardized deviations of both ``rho^2`` estimates. The
    ``rho^2`` estimates use the mean cluster size because the six clusters
    differ in size.
    """
    clean = load_bmi()
    dirty = bmi_contaminated(sex)
    cfg = fit_cfg or FitConfig()
    rows = []
    for lam in lambdas:
        fc = fit(clean, lam, cfg)
        fd = fit(dirty, lam, cfg)
        rE_c, rM_c = _rho2(fc, clean, lam)
        rE_d, rM_d = _rho2(fd, dirty, lam)
        rows.append({
            "lambda": lam,
            "masd_beta": masd_beta(fd, fc),
            "masd_pi": masd_pi(fd, fc, clean),
            "asd_rho2_E": asd(rE_d, rE_c),
            "asd_rho2_M": asd(rM_d, rM_c),
            "converged": fc.converged and fd.converged,
        })
    return rows
