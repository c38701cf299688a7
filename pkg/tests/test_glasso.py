import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_spd
from cglasso.exceptions import NotPositiveDefiniteError
from cglasso.glasso import GlassoConfig, glasso_fit, glasso_objective, kkt_residual


def _sample_cov(seed, p, n=60):
    rng = np.random.default_rng(seed)
    X = rng.multivariate_normal(np.zeros(p), random_spd(rng, p), size=n)
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / n


@pytest.mark.parametrize("seed,p,rho", [(0, 5, 0.05), (1, 12, 0.1), (2, 30, 0.02), (3, 8, 0.3)])
def test_solution_satisfies_stationarity(seed, p, rho):
    S = _sample_cov(seed, p)
    sol = glasso_fit(S, rho)
    assert sol.converged
    assert sol.kkt_residual <= 1e-6
    assert np.allclose(sol.theta, sol.theta.T)
    assert np.all(np.linalg.eigvalsh(sol.theta) > 0)


def test_matches_scikit_learn():
    sk = pytest.importorskip("sklearn.covariance")
    S = _sample_cov(4, 10)
    rho = 0.08
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, prec = sk.graphical_lasso(S, alpha=rho, tol=1e-12, enet_tol=1e-12, max_iter=10_000)
    sol = glasso_fit(S, rho)
    assert np.max(np.abs(sol.theta - prec)) < 1e-5
    assert glasso_objective(sol.theta, S, rho) >= glasso_objective(prec, S, rho) - 1e-10


def test_large_penalty_gives_diagonal_inverse_variances():
    S = _sample_cov(5, 6)
    rho = np.max(np.abs(S - np.diag(np.diag(S))))
    sol = glasso_fit(S, rho * 1.0001)
    assert np.array_equal(sol.theta, np.diag(np.diag(sol.theta)))
    assert np.allclose(np.diag(sol.theta), 1.0 / np.diag(S), rtol=1e-12)


def test_zero_penalty_is_matrix_inverse():
    S = _sample_cov(6, 5)
    sol = glasso_fit(S, 0.0)
    assert np.allclose(sol.theta, np.linalg.inv(S), rtol=1e-10)


def test_warm_start_reaches_same_solution():
    S = _sample_cov(7, 15)
    cold = glasso_fit(S, 0.05)
    warm = glasso_fit(S, 0.05, warm=glasso_fit(S, 0.1))
    assert np.max(np.abs(cold.theta - warm.theta)) < 1e-6


def test_rejects_indefinite_and_asymmetric_input():
    with pytest.raises(NotPositiveDefiniteError):
        glasso_fit(np.array([[1.0, 2.0], [2.0, 1.0]]), 0.1)
    with pytest.raises(ValueError):
        glasso_fit(np.array([[1.0, 0.2], [0.1, 1.0]]), 0.1)
    with pytest.raises(ValueError):
        glasso_fit(np.eye(2), -1.0)


def test_singular_covariance_is_fine_with_positive_penalty():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((4, 8))          # n < p
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / 4  # rank 3
    S += np.diag(np.full(8, 1e-2))
    assert np.linalg.matrix_rank(Xc.T @ Xc) < 8
    sol = glasso_fit(S, 0.1)
    assert sol.kkt_residual < 1e-6


@given(st.integers(0, 10_000), st.integers(2, 10), st.floats(0.01, 0.5))
def test_objective_never_decreases_and_kkt_holds(seed, p, rho):
    S = _sample_cov(seed, p, n=3 * p)
    sol = glasso_fit(S, rho)
    tr = sol.objective_trace
    assert np.all(np.diff(tr) >= -1e-10 * (1 + np.abs(tr[:-1])))
    assert kkt_residual(sol.theta, sol.sigma, S, rho) <= 1e-6


@given(st.integers(0, 10_000), st.floats(0.5, 3.0))
def test_scale_equivariance(seed, c):
    # scaling S by c and rho by c scales theta by 1/c
    S = _sample_cov(seed, 5)
    a = glasso_fit(S, 0.05)
    b = glasso_fit(c * S, 0.05 * c)
    assert np.max(np.abs(a.theta - c * b.theta)) < 1e-5 * np.abs(a.theta).max()


def test_config_tolerance_is_respected():
    S = _sample_cov(9, 10)
    loose = glasso_fit(S, 0.02, cfg=GlassoConfig(tol=1e-3))
    tight = glasso_fit(S, 0.02)
    assert loose.iterations <= tight.iterations
