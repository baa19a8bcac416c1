"""Per-cluster kernels for the polytomous logistic DPD machinery.

Every public kernel exists twice: a vectorised numpy version and a numba
loop version with Neumaier-compensated accumulation. ``SURVEY_DPD_BACKEND``
chooses which one the module-level names point at; both are always
importable as ``numpy_kernels`` / ``numba_kernels`` for cross-checks and
benchmarks.

Array conventions (n clusters, K = d + 1 categories, q = k + 1 covariates,
p = d * q parameters):

    beta : (d, q)      row r holds the coefficients of category r
    X    : (n, q)      covariates
    Y    : (n, K)      category counts
    m    : (n,)        units per cluster
    w    : (n,)        weights

Parameter vectors are category-major: index ``r * q + s``.

The factor ``diag^(lam-1)(pi)`` is never formed. Writing
``Delta*_rj = pi_j (delta_rj - pi_r)`` absorbs one ``pi_j`` into it, so only
``pi^lam`` and ``pi^(lam+1)`` appear and nothing blows up as a fitted
probability goes to zero.
"""
import math
from types import SimpleNamespace

import numpy as np

from ._backend import HAS_NUMBA, njit, requested_backend

PROB_FLOOR = 1e-300


# ---------------------------------------------------------------- numpy path


def _np_probabilities(beta, X):
    n = X.shape[0]
    eta = np.empty((n, beta.shape[0] + 1))
    eta[:, :-1] = X @ beta.T
    eta[:, -1] = 0.0
    eta -= eta.max(axis=1, keepdims=True)
    np.exp(eta, out=eta)
    eta /= eta.sum(axis=1, keepdims=True)
    return np.clip(eta, PROB_FLOOR, 1.0)


def reduced_residual(P, R, lam):
    """``Delta*(pi) diag^(lam-1)(pi) r`` row-wise, as ``z* - pi* sum(z)`` with
    ``z = pi^lam r``. Shape (n, d)."""
    z = (P**lam) * R if lam != 0.0 else R
    d = P.shape[1] - 1
    return z[:, :d] - P[:, :d] * np.sum(z, axis=1, keepdims=True)


def _np_reduced(P, X, Y, m, w, lam):
    # a_i = Delta*(pi_i) diag^{lam-1}(pi_i) (y_i - m_i pi_i), shape (n, d)
    return w[:, None] * reduced_residual(P, Y - m[:, None] * P, lam)


def _np_cluster_scores(beta, X, Y, m, w, lam):
    P = _np_probabilities(beta, X)
    a = _np_reduced(P, X, Y, m, w, lam)
    n, q = X.shape
    return (a[:, :, None] * X[:, None, :]).reshape(n, -1)


def _np_objective_from_probs(P, Y, m, w, lam):
    if lam == 0.0:
        return -float(np.sum(w * np.sum(Y * np.log(P), axis=1)))
    terms = np.sum(P**lam * (m[:, None] * P - (lam + 1.0) / lam * Y), axis=1)
    return float(np.sum(w * terms))


def _np_objective(beta, X, Y, m, w, lam):
    return _np_objective_from_probs(_np_probabilities(beta, X), Y, m, w, lam)


def _np_middle(P, lam):
    """``B_i = Delta* diag^{lam-1} Delta*^T`` (n, d, d) and
    ``A_i = Delta* diag^{lam-1}`` (n, d, K)."""
    n, K = P.shape
    d = K - 1
    E = -np.broadcast_to(P[:, :d, None], (n, d, K)).copy()  # E_rj = delta_rj - pi_r
    idx = np.arange(d)
    E[:, idx, idx] += 1.0
    A = E * (P**lam)[:, None, :]
    B = np.einsum("nrj,nj,nsj->nrs", A, P, E)
    return B, A


def _np_delta(P):
    Delta = -P[:, :, None] * P[:, None, :]
    idx = np.arange(P.shape[1])
    Delta[:, idx, idx] += P
    return Delta


def _kron_sum(coef, B, X):
    # sum_i coef_i * (B_i kron x_i x_i^T)
    n, d, _ = B.shape
    q = X.shape[1]
    out = np.einsum("n,nrs,na,nb->rasb", coef, B, X, X)
    return out.reshape(d * q, d * q)


def _np_accumulate(beta, X, Y, m, w, lam, want_psi):
    P = _np_probabilities(beta, X)
    a = _np_reduced(P, X, Y, m, w, lam)
    u = np.einsum("nr,ns->rs", a, X).reshape(-1)
    obj = _np_objective_from_probs(P, Y, m, w, lam)
    p = u.shape[0]
    if want_psi:
        B, _ = _np_middle(P, lam)
        psi = _kron_sum(w * m, B, X)
    else:
        psi = np.zeros((p, p))
    return u, psi, obj


def _np_omega_model(beta, X, m, w, lam, nu):
    P = _np_probabilities(beta, X)
    _, A = _np_middle(P, lam)
    C = np.einsum("nrj,njl,nsl->nrs", A, _np_delta(P), A)
    return _kron_sum(w * w * m * nu, C, X)


# ---------------------------------------------------------------- numba path


@njit
def _nb_probs_row(beta, x, out):
    d, q = beta.shape
    mx = 0.0
    for r in range(d):
        s = 0.0
        for c in range(q):
            s += x[c] * beta[r, c]
        out[r] = s
        if s > mx:
            mx = s
    out[d] = 0.0
    tot = 0.0
    for r in range(d + 1):
        out[r] = math.exp(out[r] - mx)
        tot += out[r]
    for r in range(d + 1):
        v = out[r] / tot
        if v < PROB_FLOOR:
            v = PROB_FLOOR
        out[r] = v


@njit
def _nb_power(v, lam):
    # pi^lam with 0^0 = 1
    if lam == 0.0:
        return 1.0
    return v**lam


@njit
def _nb_add(acc, comp, idx, val):
    # Neumaier compensated accumulation into flat arrays
    t = acc[idx] + val
    if abs(acc[idx]) >= abs(val):
        comp[idx] += (acc[idx] - t) + val
    else:
        comp[idx] += (val - t) + acc[idx]
    acc[idx] = t


@njit
def _nb_probabilities(beta, X):
    n = X.shape[0]
    P = np.empty((n, beta.shape[0] + 1))
    for i in range(n):
        _nb_probs_row(beta, X[i], P[i])
    return P


@njit
def _nb_cluster_scores(beta, X, Y, m, w, lam):
    n, q = X.shape
    d = beta.shape[0]
    K = d + 1
    U = np.empty((n, d * q))
    pi = np.empty(K)
    z = np.empty(K)
    for i in range(n):
        _nb_probs_row(beta, X[i], pi)
        sz = 0.0
        for j in range(K):
            z[j] = _nb_power(pi[j], lam) * (Y[i, j] - m[i] * pi[j])
            sz += z[j]
        for r in range(d):
            a = w[i] * (z[r] - pi[r] * sz)
            for c in range(q):
                U[i, r * q + c] = a * X[i, c]
    return U


@njit
def _nb_accumulate(beta, X, Y, m, w, lam, want_psi):
    n, q = X.shape
    d = beta.shape[0]
    K = d + 1
    p = d * q
    u = np.zeros(p)
    uc = np.zeros(p)
    psi = np.zeros(p * p)
    psic = np.zeros(p * p)
    obj = np.zeros(1)
    objc = np.zeros(1)
    pi = np.empty(K)
    pw = np.empty(K)
    z = np.empty(K)
    B = np.empty((d, d))
    for i in range(n):
        _nb_probs_row(beta, X[i], pi)
        sz = 0.0
        term = 0.0
        for j in range(K):
            pw[j] = _nb_power(pi[j], lam)
            z[j] = pw[j] * (Y[i, j] - m[i] * pi[j])
            sz += z[j]
            if lam == 0.0:
                term -= Y[i, j] * math.log(pi[j])
            else:
                term += pi[j] ** lam * (m[i] * pi[j] - (lam + 1.0) / lam * Y[i, j])
        _nb_add(obj, objc, 0, w[i] * term)
        for r in range(d):
            a = w[i] * (z[r] - pi[r] * sz)
            for c in range(q):
                _nb_add(u, uc, r * q + c, a * X[i, c])
        if want_psi:
            # B_rs = sum_j pi_j^(lam+1) (delta_rj - pi_r) (delta_sj - pi_s)
            for r in range(d):
                for s in range(r, d):
                    acc = 0.0
                    for j in range(K):
                        erj = (1.0 if r == j else 0.0) - pi[r]
                        esj = (1.0 if s == j else 0.0) - pi[s]
                        acc += erj * pw[j] * pi[j] * esj
                    B[r, s] = acc
                    B[s, r] = acc
            coef = w[i] * m[i]
            for r in range(d):
                for s in range(d):
                    brs = coef * B[r, s]
                    for a1 in range(q):
                        for b1 in range(q):
                            _nb_add(psi, psic, (r * q + a1) * p + s * q + b1,
                                    brs * X[i, a1] * X[i, b1])
    return u + uc, (psi + psic).reshape(p, p), obj[0] + objc[0]


@njit
def _nb_objective(beta, X, Y, m, w, lam):
    n = X.shape[0]
    K = beta.shape[0] + 1
    pi = np.empty(K)
    obj = np.zeros(1)
    objc = np.zeros(1)
    for i in range(n):
        _nb_probs_row(beta, X[i], pi)
        term = 0.0
        for j in range(K):
            if lam == 0.0:
                term -= Y[i, j] * math.log(pi[j])
            else:
                term += pi[j] ** lam * (m[i] * pi[j] - (lam + 1.0) / lam * Y[i, j])
        _nb_add(obj, objc, 0, w[i] * term)
    return obj[0] + objc[0]


@njit
def _nb_omega_model(beta, X, m, w, lam, nu):
    n, q = X.shape
    d = beta.shape[0]
    K = d + 1
    p = d * q
    out = np.zeros(p * p)
    outc = np.zeros(p * p)
    pi = np.empty(K)
    A = np.empty((d, K))
    Dl = np.empty((K, K))
    C = np.empty((d, d))
    for i in range(n):
        _nb_probs_row(beta, X[i], pi)
        for j in range(K):
            for l in range(K):
                Dl[j, l] = pi[j] * ((1.0 if j == l else 0.0) - pi[l])
        for r in range(d):
            for j in range(K):
                A[r, j] = ((1.0 if r == j else 0.0) - pi[r]) * _nb_power(pi[j], lam)
        for r in range(d):
            for s in range(d):
                acc = 0.0
                for j in range(K):
                    for l in range(K):
                        acc += A[r, j] * Dl[j, l] * A[s, l]
                C[r, s] = acc
        coef = w[i] * w[i] * m[i] * nu[i]
        for r in range(d):
            for s in range(d):
                crs = coef * C[r, s]
                for a1 in range(q):
                    for b1 in range(q):
                        _nb_add(out, outc, (r * q + a1) * p + s * q + b1,
                                crs * X[i, a1] * X[i, b1])
    return (out + outc).reshape(p, p)


# ---------------------------------------------------------------- dispatch

numpy_kernels = SimpleNamespace(
    name="numpy",
    probabilities=_np_probabilities,
    cluster_scores=_np_cluster_scores,
    accumulate=_np_accumulate,
    objective=_np_objective,
    omega_model=_np_omega_model,
)

numba_kernels = SimpleNamespace(
    name="numba",
    probabilities=_nb_probabilities,
    cluster_scores=_nb_cluster_scores,
    accumulate=_nb_accumulate,
    objective=_nb_objective,
    omega_model=_nb_omega_model,
) if HAS_NUMBA else None

BACKEND = requested_backend()
active = numba_kernels if BACKEND == "numba" else numpy_kernels

probabilities = active.probabilities
cluster_scores = active.cluster_scores
accumulate = active.accumulate
objective = active.objective
omega_model = active.omega_model
