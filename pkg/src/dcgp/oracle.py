"""Brute-force reference computations for the test-suite.

Nothing here touches the package's kernels, Cholesky or triangular solves:
kernels are evaluated by explicit pairwise differences, inverses come from
``np.linalg.inv`` and matrix square roots from an eigendecomposition.  The
point is that agreement with the main code path is evidence, not tautology.
"""
from dataclasses import dataclass

import numpy as np

from .errors import SingularMatrix

MAX_DIM = 16


@dataclass
class OracleReport:
    quantity: str
    reference: float
    candidate: float
    abs_error: float
    rel_error: float


def compare(quantity, reference, candidate, eps=1e-12):
    reference, candidate = np.asarray(reference, float), np.asarray(candidate, float)
    diff = np.abs(reference - candidate)
    a = float(np.max(diff)) if diff.size else 0.0
    r = float(np.max(diff / np.maximum(np.abs(reference), eps))) if diff.size else 0.0
    ref = float(np.max(np.abs(reference))) if reference.size else 0.0
    cand = float(np.max(np.abs(candidate))) if candidate.size else 0.0
    return OracleReport(quantity, ref, cand, a, r)


def _rbf(A, B, lengthscale, variance):
    K = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            K[i, j] = variance * np.exp(-np.dot(a - b, a - b) / (2.0 * lengthscale**2))
    return K


def _inv(K):
    try:
        inv = np.linalg.inv(K)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    if not np.all(np.isfinite(inv)) or np.linalg.cond(K) > 1e14:
        raise SingularMatrix("matrix is numerically singular")
    return inv


def dense_conditional(patches, Z, m, S, lengthscale, variance):
    """Mean ``P x C`` and covariance ``C x P x P`` by explicit inversion.

    ``m`` is ``C x M`` (or ``M``), ``S`` is ``C x M x M`` (or ``M x M``) and is
    the covariance itself, not a factor.
    """
    X = np.atleast_2d(np.asarray(patches, float))
    Z = np.atleast_2d(np.asarray(Z, float))
    m = np.atleast_2d(np.asarray(m, float))
    S = np.asarray(S, float)
    S = S[None] if S.ndim == 2 else S
    if len(X) > MAX_DIM or len(Z) > MAX_DIM:
        raise ValueError("oracle is capped at 16 patches and 16 inducing points")
    Kxx = _rbf(X, X, lengthscale, variance)
    Kxz = _rbf(X, Z, lengthscale, variance)
    Kzz_inv = _inv(_rbf(Z, Z, lengthscale, variance))
    A = Kxz @ Kzz_inv
    Kzz = _rbf(Z, Z, lengthscale, variance)
    means = np.stack([A @ mc for mc in m], axis=1)
    covs = np.stack([Kxx - A @ Kzz @ A.T + A @ Sc @ A.T for Sc in S])
    return means, covs


def _log_softmax(f):
    mx = np.max(f, axis=-1, keepdims=True)
    return f - mx - np.log(np.sum(np.exp(f - mx), axis=-1, keepdims=True))


def mc_expected_loglik_oracle(mean, var, label, n=10**6, seed=0, chunk=200_000):
    """Plain Monte Carlo ``E[log softmax(f)[label]]`` for ``f ~ N(mean, diag(var))``.

    Returns ``(estimate, standard_error)``.
    """
    mean = np.asarray(mean, float)
    sd = np.sqrt(np.maximum(np.asarray(var, float), 0.0))
    if np.all(sd == 0):
        return float(_log_softmax(mean)[label]), 0.0
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        vals = _log_softmax(mean + sd * rng.standard_normal((k, mean.size)))[:, label]
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += k
    est = total / n
    var_hat = max(total_sq / n - est**2, 0.0) * n / (n - 1)
    return float(est), float(np.sqrt(var_hat / n))


def _gauss_logpdf(U, mu, cov):
    inv = _inv(cov)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise SingularMatrix("covariance is not positive definite")
    D = U - mu
    return -0.5 * (np.einsum("ni,ij,nj->n", D, inv, D) + logdet + len(mu) * np.log(2 * np.pi))


def gaussian_kl_numeric(m, S, K, n=10**6, seed=0, chunk=200_000):
    """Monte Carlo ``E_q[log q - log p]`` with ``q = N(m, S)``, ``p = N(0, K)``.

    Returns ``(estimate, standard_error)``.
    """
    m = np.atleast_1d(np.asarray(m, float))
    S = np.atleast_2d(np.asarray(S, float))
    K = np.atleast_2d(np.asarray(K, float))
    if m.size > 4:
        raise ValueError("numeric KL oracle is capped at 4 dimensions")
    evals, evecs = np.linalg.eigh(S)
    root = evecs * np.sqrt(np.maximum(evals, 0.0))
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    zero = np.zeros_like(m)
    while done < n:
        k = min(chunk, n - done)
        U = m + rng.standard_normal((k, m.size)) @ root.T
        vals = _gauss_logpdf(U, m, S) - _gauss_logpdf(U, zero, K)
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += k
    est = total / n
    var_hat = max(total_sq / n - est**2, 0.0) * n / (n - 1)
    return float(est), float(np.sqrt(var_hat / n))
