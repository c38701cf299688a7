import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

import cglasso.path as path_mod
from cglasso.em import EMConfig, fit_em
from cglasso.exceptions import DataError, NumericalError
from cglasso.model_core import CensoringBounds, encode_censoring
from cglasso.path import (PathResult, bic_approx, bic_exact, diagonal_start, fit_path, n_offdiag_nonzero, rho_grid,
                          rho_max, select, tobit_loglik, univariate_censored_mle)
from cglasso.sim import SimSpec, gen_censored_sample


def _data(seed, p=8, H=4, prob=0.3, n=80):
    return gen_censored_sample(SimSpec(p, n, 2.0 / p, H, 40.0, prob, seed=seed))[0]


def test_grid_shapes():
    g = rho_grid(1.0, 0.01, 5)
    assert g[0] == 1.0 and g[-1] == 0.01 and np.allclose(np.diff(g), np.diff(g)[0])
    lg = rho_grid(1.0, 0.01, 3, "log")
    assert np.allclose(lg, [1.0, 0.1, 0.01])
    for args in [(1.0, 0.01, 1), (0.1, 0.2, 5), (1.0, 0.0, 4, "log"), (1.0, 0.1, 4, "cubic")]:
        with pytest.raises(ValueError):
            rho_grid(*args)


def test_tobit_mle_matches_direct_optimization():
    ds = _data(0)
    h = int(np.flatnonzero(ds.indicator.any(axis=0))[0])
    mu, s2 = univariate_censored_mle(ds, h)
    x = ds.values[ds.indicator[:, h] == 0, h]
    res = minimize(lambda z: -tobit_loglik(ds, h, z[0], np.exp(z[1])), [x.mean(), np.log(x.var())],
                   method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-12, maxiter=10_000))
    assert mu == pytest.approx(res.x[0], abs=1e-5)
    assert s2 == pytest.approx(np.exp(res.x[1]), rel=1e-5)
    assert tobit_loglik(ds, h, mu, s2) >= -res.fun - 1e-9


def test_tobit_mle_uncensored_is_sample_moments():
    ds = _data(1, H=0)
    mu, s2 = univariate_censored_mle(ds, 0)
    x = ds.values[:, 0]
    assert mu == pytest.approx(x.mean()) and s2 == pytest.approx(x.var())


def test_all_censored_column_is_rejected():
    X = np.array([[1.0, 50.0], [2.0, 60.0], [3.0, 45.0]])
    ds = encode_censoring(X, CensoringBounds.uniform(2, -np.inf, 40.0))
    with pytest.raises(DataError, match="X2"):
        rho_max(ds)


def test_largest_penalty_gives_the_diagonal_model():
    ds = _data(2)
    rmax, params0 = rho_max(ds)
    at = fit_em(ds, rmax, init=params0)
    assert np.max(np.abs(at.params.theta - params0.theta)) < 1e-10
    assert np.max(np.abs(at.params.mu - params0.mu)) < 1e-10
    above = fit_em(ds, 1.01 * rmax)
    assert n_offdiag_nonzero(above.params.theta) == 0
    # slightly below the largest penalty an edge enters
    below = fit_em(ds, 0.9 * rmax, init=params0)
    assert n_offdiag_nonzero(below.params.theta) > 0


def test_largest_penalty_is_reached_from_a_dense_start():
    ds = _data(3)
    rmax, params0 = rho_max(ds)
    dense = fit_em(ds, 0.2 * rmax).params
    back = fit_em(ds, rmax * 1.001, init=dense, cfg=EMConfig(tol=1e-9, max_iter=2000))
    assert n_offdiag_nonzero(back.params.theta) == 0
    assert np.max(np.abs(back.params.mu - params0.mu)) < 1e-5


def test_path_is_warm_started_and_scored():
    ds = _data(4)
    path = fit_path(ds, K=8, rho_min=0.05, ratio=True)
    assert path.complete and len(path.fits) == 8
    assert path.rhos[-1] == pytest.approx(0.05 * path.rho_max)
    counts = path.edge_counts()
    assert counts[0] == 0 and counts[-1] >= counts[0]
    assert np.all(np.isfinite(path.abic))
    assert path.selected["abic"] == int(np.argmin(path.abic))
    bic = bic_exact(path, ds, n_draws=2000)
    assert path.selected["bic"] == int(np.argmin(bic))
    assert select(path, "bic") == path.selected["bic"]


def test_approximate_bic_formula():
    ds = _data(5)
    path = fit_path(ds, K=4, rho_min=0.1, ratio=True)
    f = path.fits[2]
    theta, S = f.params.theta, f.suffstats.S
    a = n_offdiag_nonzero(theta)
    ref = -np.linalg.slogdet(theta)[1] + np.trace(theta @ S) + (2 * ds.p + a) * np.log(ds.n) / ds.n
    assert bic_approx(path)[2] == pytest.approx(ref, rel=1e-12)


def test_select_prefers_larger_penalty_on_ties():
    assert select([3.0, 1.0, 1.0, 2.0]) == 1
    with pytest.raises(ValueError):
        select(PathResult(np.array([1.0]), [], 1, 1, "meanfield", 1.0, None), "bic")


def test_failed_fit_returns_partial_path(monkeypatch):
    ds = _data(6)
    real = path_mod.fit_em
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericalError("synthetic failure")
        return real(*a, **k)

    monkeypatch.setattr(path_mod, "fit_em", flaky)
    path = fit_path(ds, K=5, rho_min=0.1, ratio=True)
    assert not path.complete and len(path.fits) == 2 and len(path.rhos) == 2
    assert "synthetic failure" in path.error


def test_mar_start_uses_observed_moments():
    ds = _data(7)
    params = diagonal_start(ds, "mar")
    obs = ds.indicator == 0
    h = int(np.flatnonzero(~obs.all(axis=0))[0])
    assert params.mu[h] == pytest.approx(ds.values[obs[:, h], h].mean())


@given(st.integers(0, 500))
def test_edges_vanish_above_largest_penalty(seed):
    ds = _data(seed, p=5, H=2, n=40)
    rmax, _ = rho_max(ds)
    assert n_offdiag_nonzero(fit_em(ds, rmax * 1.0001).params.theta) == 0


def test_explicit_grid_must_decrease():
    ds = _data(8)
    with pytest.raises(ValueError):
        fit_path(ds, rhos=[0.1, 0.2])
