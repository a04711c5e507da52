import numpy as np
import pytest

from dcgp.errors import SingularMatrix
from dcgp.kernels import RBFHyper, inducing_gram, kernel_matrix
from dcgp.layers import VariationalGaussian, kl_to_prior
from dcgp.linalg import cholesky
from dcgp.model import expected_loglik
from dcgp.oracle import compare, dense_conditional, gaussian_kl_numeric, mc_expected_loglik_oracle


def test_compare_errors():
    r = compare("x", 2.0, 2.5)
    assert r.abs_error == 0.5 and r.rel_error == 0.25


def test_dense_conditional_prior_case(rng):
    Z, X = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    h = RBFHyper()
    K = inducing_gram(Z, h)
    mean, cov = dense_conditional(X, Z, np.zeros(4), K, 1.0, 1.0)
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(cov[0], kernel_matrix(X, X, h), atol=1e-9)


def test_dense_conditional_interpolates(rng):
    Z = rng.standard_normal((4, 2))
    m = rng.standard_normal(4)
    mean, cov = dense_conditional(Z, Z, m, np.zeros((4, 4)), 1.0, 1.0)
    np.testing.assert_allclose(mean[:, 0], m, atol=1e-9)
    np.testing.assert_allclose(cov[0], 0.0, atol=1e-9)


def test_dense_conditional_singular():
    Z = np.ones((3, 2))
    with pytest.raises(SingularMatrix):
        dense_conditional(np.zeros((1, 2)), Z, np.zeros(3), np.eye(3), 1.0, 1.0)


def test_dense_conditional_size_cap(rng):
    with pytest.raises(ValueError):
        dense_conditional(rng.standard_normal((17, 2)), rng.standard_normal((3, 2)), np.zeros(3), np.eye(3), 1, 1)


def test_mc_oracle_zero_variance():
    est, se = mc_expected_loglik_oracle(np.array([1.0, 0.0, -1.0]), np.zeros(3), 0)
    logp = 1.0 - np.log(np.exp(1.0) + 1.0 + np.exp(-1.0))
    assert est == pytest.approx(logp, abs=1e-15) and se == 0.0


def test_mc_oracle_two_seed_agreement():
    a, sa = mc_expected_loglik_oracle(np.zeros(2), np.ones(2), 0, n=200_000, seed=1)
    b, sb = mc_expected_loglik_oracle(np.zeros(2), np.ones(2), 0, n=200_000, seed=2)
    assert a < np.log(0.5)  # Jensen gap
    assert abs(a - b) < 4 * np.hypot(sa, sb)


def test_main_estimator_within_four_sigma():
    rng = np.random.default_rng(77)
    for case in range(20):
        C = 3
        mean, var = rng.standard_normal(C), rng.random(C) * 2
        y = int(rng.integers(C))
        ref, se_ref = mc_expected_loglik_oracle(mean, var, y, n=200_000, seed=case)
        S = 25
        logits = mean + np.sqrt(var) * rng.standard_normal((S, C))
        est = expected_loglik(logits, y)
        # spread of the S-sample estimator itself dominates the oracle's error
        lsm = logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))
        se_main = lsm[:, y].std(ddof=1) / np.sqrt(S)
        assert abs(est - ref) < 4 * np.hypot(se_main, se_ref) + 1e-12


def test_kl_numeric_examples(rng):
    est, se = gaussian_kl_numeric(np.zeros(2), np.eye(2), np.eye(2), n=100_000)
    assert abs(est) <= 4 * se + 1e-12
    est, se = gaussian_kl_numeric(np.ones(1), np.ones((1, 1)), np.ones((1, 1)), n=200_000)
    assert abs(est - 0.5) < 4 * se
    B = rng.standard_normal((3, 3))
    K = B @ B.T + np.eye(3)
    Ls = np.tril(rng.standard_normal((3, 3))) * 0.5 + np.eye(3)
    m = rng.standard_normal(3)
    est, se = gaussian_kl_numeric(m, Ls @ Ls.T, K, n=200_000, seed=3)
    closed = kl_to_prior(VariationalGaussian(m, Ls), cholesky(K))
    assert abs(est - closed) < 4 * se
    with pytest.raises(ValueError):
        gaussian_kl_numeric(np.zeros(5), np.eye(5), np.eye(5))
