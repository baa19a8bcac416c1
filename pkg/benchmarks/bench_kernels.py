"""Compare the numba and numpy kernel backends.

Run ``python3 benchmarks/bench_kernels.py [--sizes 100,1000,10000]``. Both
namespaces are importable regardless of ``SURVEY_DPD_BACKEND``; the first
numba call per signature is excluded as compilation warm-up.
"""
import argparse
import timeit

import numpy as np

from survey_dpd import _kernels


def problem(n, d=2, k=2, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k))])
    beta = 0.5 * rng.standard_normal((d, k + 1))
    P = _kernels.numpy_kernels.probabilities(beta, X)
    m = np.full(n, 21.0)
    Y = np.array([rng.multinomial(21, p) for p in P], dtype=float)
    return beta, X, Y, m, np.ones(n)


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="100,1000,10000")
    ap.add_argument("--lam", type=float, default=0.4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels.numba_kernels is None:
        raise SystemExit("numba is not installed; nothing to compare")
    lam = args.lam
    print(f"{'kernel':<14}{'n':>8}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for n in (int(s) for s in args.sizes.split(",")):
        beta, X, Y, m, w = problem(n)
        cases = {
            "accumulate": lambda ns: ns.accumulate(beta, X, Y, m, w, lam, True),
            "scores": lambda ns: ns.cluster_scores(beta, X, Y, m, w, lam),
            "omega_model": lambda ns: ns.omega_model(beta, X, m, w, lam, np.ones(n)),
        }
        for name, call in cases.items():
            call(_kernels.numba_kernels)  # compile
            t_np = bench(lambda: call(_kernels.numpy_kernels), args.repeat)
            t_nb = bench(lambda: call(_kernels.numba_kernels), args.repeat)
            print(f"{name:<14}{n:>8}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
