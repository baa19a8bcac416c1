"""Command-line front end: ``survey-dpd {fit,test,influence,simulate,compare}``.

Exit codes: 0 success, 1 input/parse error, 2 a fit did not converge.
Datasets are CSV paths or one of the builtin names ``bmi``, ``bmi-men45``,
``bmi-women45``. Reports are JSON written atomically.
"""
import argparse
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__, _kernels
from .asymptotics import IdentifiabilityError, sandwich, stratumwise_matrices
from .datasets import BUILTIN, load_builtin
from .fitting import FitConfig, fit
from .inference import LinearHypothesis, wald_statistic
from .io import SCHEMA_VERSION, atomic_write_text, dumps_report, read_dataset
from .model import InputError
from .overdispersion import nu_estimating_equation, nu_moments, nu_per_stratum
from .robustness import (ContaminationPoint, ContaminationSet, asd, covariate_patterns,
                         if2_wald, if_estimator, if_estimator_multi)

logger = logging.getLogger("survey_dpd")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


def _load(path):
    if path in BUILTIN:
        return load_builtin(path)
    if not os.path.exists(path):
        raise InputError(f"no such dataset: {path}")
    return read_dataset(path)


def _lambdas(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad lambda list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise InputError("lambda list must hold nonnegative numbers")
    return vals


def _json_arg(text):
    """Inline JSON or a path to a JSON file."""
    if os.path.exists(text):
        with open(text) as fh:
            return fh.read()
    return text


def _versions():
    import scipy
    return {"survey_dpd": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "backend": _kernels.BACKEND}


def _emit(report, out):
    text = dumps_report(report)
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _overdispersion(res, data, lam, m_bar_mode, notes):
    m = data.unit_counts
    m_bar = None
    if not np.all(m == m[0]):
        if m_bar_mode == "refuse":
            raise InputError("cluster sizes differ; pass --m-bar mean to use the mean size")
        m_bar = float(np.mean(m))
        notes.append(f"unequal cluster sizes: rho^2 uses the mean size {m_bar!r}")
    return [nu_estimating_equation(res, data, lam, m_bar=m_bar),
            nu_moments(res, data, m_bar=m_bar)]


def _bundle_dict(b):
    return {"omega_variant": b.omega_variant.value, "n": b.n,
            "condition_number": b.condition_number,
            "psi": b.psi, "omega": b.omega, "q": b.q,
            "standard_errors": np.sqrt(np.clip(np.diag(b.q), 0, None))}


def cmd_fit(args):
    data = _load(args.dataset)
    cfg = FitConfig(max_iterations=args.max_iter, gradient_tolerance=args.tol)
    patterns = covariate_patterns(data)
    results, any_fail = [], False
    for lam in _lambdas(args.lambdas):
        t0 = time.perf_counter()
        res = fit(data, lam, cfg)
        any_fail |= not res.converged
        notes = []
        od = _overdispersion(res, data, lam, args.m_bar, notes)
        nu = od[0].nu if args.omega == "overdispersed" else None
        bundle = sandwich(res.beta_hat, data, lam, variant=args.omega, nu=nu)
        entry = {
            "lambda": lam, "fit": res.to_dict(),
            "covariance": _bundle_dict(bundle),
            "overdispersion": [o.to_dict() for o in od],
            "fitted_probabilities": _kernels.probabilities(res.beta_hat,
                                                           np.ascontiguousarray(patterns)),
            "notes": notes,
        }
        if args.per_stratum:
            strata, eta = stratumwise_matrices(res.beta_hat, data, lam)
            entry["strata"] = [{"stratum": s.stratum_id, "n_h": s.n_h, "psi": s.psi,
                                "omega": s.omega, "omega_hat": s.omega_hat} for s in strata]
            entry["eta"] = eta
            try:
                entry["overdispersion_per_stratum"] = [
                    o.to_dict() for meth in ("estimating_equation", "moments")
                    for o in nu_per_stratum(res, data, lam, meth)]
            except InputError as exc:
                entry["notes"].append(f"per-stratum overdispersion skipped: {exc}")
        entry["seconds"] = time.perf_counter() - t0
        results.append(entry)
    report = {
        "schema_version": SCHEMA_VERSION, "kind": "fit",
        "inputs": {"dataset": args.dataset, "lambdas": _lambdas(args.lambdas),
                   "omega": args.omega, "per_stratum": args.per_stratum},
        "versions": _versions(),
        "covariate_patterns": patterns,
        "results": results,
    }
    _emit(report, args.out)
    return EXIT_NOT_CONVERGED if any_fail else EXIT_OK


def cmd_test(args):
    data = _load(args.dataset)
    hyp, alpha = LinearHypothesis.from_json(_json_arg(args.hypothesis), n_params=data.n_params)
    if args.alpha is not None:
        alpha = args.alpha
    results, any_fail = [], False
    for lam in _lambdas(args.lambdas):
        res = fit(data, lam, FitConfig())
        any_fail |= not res.converged
        bundle = sandwich(res.beta_hat, data, lam, variant=args.omega)
        tr = wald_statistic(res, bundle, hyp, alpha)
        print(f"lambda={lam:g} W={tr.statistic:.6g} dof={tr.dof} crit={tr.critical_value:.6g} "
              f"p={tr.p_value:.6g} {'reject' if tr.reject else 'do not reject'}",
              file=sys.stderr)
        results.append({"lambda": lam, "fit": res.to_dict(), "test": tr.to_dict()})
    report = {"schema_version": SCHEMA_VERSION, "kind": "test",
              "inputs": {"dataset": args.dataset, "hypothesis": json.loads(hyp.to_json(alpha)),
                         "omega": args.omega},
              "versions": _versions(), "results": results}
    _emit(report, args.out)
    return EXIT_NOT_CONVERGED if any_fail else EXIT_OK


def _contamination(text, data):
    try:
        spec = json.loads(_json_arg(text))
    except json.JSONDecodeError as exc:
        raise InputError(f"contamination is not valid JSON: {exc}") from None
    if isinstance(spec, dict):
        spec = [spec]
    try:
        pts = [ContaminationPoint.at_category(int(s["stratum"]), int(s["cluster"]),
                                              int(s["category"]), data.num_categories)
               for s in spec]
    except (KeyError, TypeError):
        raise InputError('each contamination entry needs "stratum", "cluster", "category"') \
            from None
    return pts


def cmd_influence(args):
    data = _load(args.dataset)
    pts = _contamination(args.contamination, data)
    out, any_fail = [], False
    for lam in _lambdas(args.lambdas):
        res = fit(data, lam, FitConfig())
        any_fail |= not res.converged
        b = res.beta_hat
        entry = {"lambda": lam, "beta_hat": b,
                 "points": [{"stratum": p.stratum, "cluster": p.cluster,
                             "t": list(p.t_vector), "if": if_estimator(b, data, lam, p)}
                            for p in pts],
                 "if_total": if_estimator_multi(b, data, lam, ContaminationSet(tuple(pts)))}
        if args.hypothesis:
            hyp, _ = LinearHypothesis.from_json(_json_arg(args.hypothesis), data.n_params)
            # evaluate at the fit, with l moved so that the fit lies on the null
            centred = LinearHypothesis(hyp.m_matrix, hyp.m_matrix.T @ b.reshape(-1))
            entry["if2_wald"] = if2_wald(b, data, lam, centred, ContaminationSet(tuple(pts)))
        out.append(entry)
    report = {"schema_version": SCHEMA_VERSION, "kind": "influence",
              "inputs": {"dataset": args.dataset, "contamination": json.loads(
                  _json_arg(args.contamination))},
              "versions": _versions(), "results": out}
    _emit(report, args.out)
    return EXIT_NOT_CONVERGED if any_fail else EXIT_OK


def cmd_simulate(args):
    from dataclasses import replace

    from .simulation import (ScenarioSpec, beta02_hypothesis, run_level_power_study,
                             run_rmse_study)

    spec = ScenarioSpec.from_json(_json_arg(args.scenario)) if args.scenario else ScenarioSpec()
    over = {}
    if args.reps is not None:
        over["replications"] = args.reps
    if args.seed is not None:
        over["seed"] = args.seed
    if args.lambdas:
        over["lambda_grid"] = tuple(_lambdas(args.lambdas))
    spec = replace(spec, **over)
    if args.study == "rmse":
        table = run_rmse_study(spec, workers=args.workers)
    else:
        hyp = beta02_hypothesis(spec, args.null_value)
        alt = spec.beta.copy()
        alt[1, 0] = args.alt_value
        table = run_level_power_study(spec, hyp, alt, alpha=args.alpha, workers=args.workers)
    csv_text = table.to_csv()
    if args.out:
        atomic_write_text(args.out, csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.summary:
        atomic_write_text(args.summary, dumps_report(table.summary))
    return EXIT_OK


def _load_report(path):
    with open(path) as fh:
        try:
            rep = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not a JSON report ({exc})") from None
    if rep.get("kind") != "fit":
        raise InputError(f"{path}: expected a fit report")
    return rep


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.any(b == 0):
        raise InputError("zero reference entry in comparison")
    return float(np.mean(np.abs((a - b) / b)))


def cmd_compare(args):
    """Deviations of report A (contaminated) from report B (reference), per lambda."""
    ra, rb = _load_report(args.report_a), _load_report(args.report_b)
    by_lam = {r["lambda"]: r for r in rb["results"]}
    rows = []
    for a in ra["results"]:
        b = by_lam.get(a["lambda"])
        if b is None:
            continue
        row = {"lambda": a["lambda"],
               "masd_beta": _rel(a["fit"]["beta_hat"], b["fit"]["beta_hat"]),
               "masd_pi": _rel(a["fitted_probabilities"], b["fitted_probabilities"])}
        for oa, ob in zip(a["overdispersion"], b["overdispersion"]):
            tag = "E" if oa["method"] == "estimating_equation" else "M"
            row[f"asd_rho2_{tag}"] = asd(oa["rho_squared"], ob["rho_squared"])
        rows.append(row)
    report = {"schema_version": SCHEMA_VERSION, "kind": "compare",
              "inputs": {"report_a": args.report_a, "report_b": args.report_b}, "rows": rows}
    _emit(report, args.out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="survey-dpd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit for each lambda and report covariances")
    f.add_argument("dataset")
    f.add_argument("--lambda", dest="lambdas", default="0")
    f.add_argument("--omega", choices=("multinomial", "overdispersed", "empirical"),
                   default="empirical")
    f.add_argument("--per-stratum", action="store_true",
                   help="also report stratum-wise matrices and overdispersion")
    f.add_argument("--m-bar", choices=("mean", "refuse"), default="mean",
                   help="what to do when cluster sizes differ")
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=int, default=200)
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("test", help="Wald-type test of M^T beta = l")
    t.add_argument("dataset")
    t.add_argument("--hypothesis", required=True, help='JSON {"M", "l", "alpha"} or a path')
    t.add_argument("--lambda", dest="lambdas", default="0")
    t.add_argument("--alpha", type=float)
    t.add_argument("--omega", choices=("multinomial", "empirical"), default="empirical")
    t.add_argument("--out")
    t.set_defaults(func=cmd_test)

    i = sub.add_parser("influence", help="influence functions at the fitted model")
    i.add_argument("dataset")
    i.add_argument("--contamination", required=True,
                   help='JSON list of {"stratum", "cluster", "category"} or a path')
    i.add_argument("--lambda", dest="lambdas", default="0")
    i.add_argument("--hypothesis", help="hypothesis JSON for the Wald second-order IF")
    i.add_argument("--out")
    i.set_defaults(func=cmd_influence)

    s = sub.add_parser("simulate", help="Monte Carlo RMSE or level/power study")
    s.add_argument("--scenario", help="scenario JSON or a path")
    s.add_argument("--study", choices=("rmse", "levelpower"), default="rmse")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lambda", dest="lambdas")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--null-value", type=float, default=0.6)
    s.add_argument("--alt-value", type=float, default=1.08)
    s.add_argument("--workers", type=int, help="processes (default $SURVEY_DPD_WORKERS or 1)")
    s.add_argument("--out", help="CSV table path")
    s.add_argument("--summary", help="JSON summary path")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="masd/asd between two fit reports")
    c.add_argument("report_a", help="contaminated-data fit report")
    c.add_argument("report_b", help="reference fit report")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IdentifiabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
