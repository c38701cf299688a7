"""Graphical lasso M-step with an unpenalized diagonal.

Solves ``max_{Theta > 0} log det Theta - tr(Theta S) - rho * sum_{h != k} |theta_hk|``
by primal block coordinate ascent over columns: each block update minimizes
exactly over one column of ``Theta`` (the diagonal entry in closed form, the
off-diagonal part by a cyclic coordinate-descent lasso), so every iterate is
positive definite and the objective never decreases.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .exceptions import NotPositiveDefiniteError


@dataclass(frozen=True)
class GlassoConfig:
    tol: float = 1e-8
    max_sweeps: int = 10_000
    inner_max: int = 10_000


@dataclass(frozen=True)
class GlassoSolution:
    theta: np.ndarray
    sigma: np.ndarray
    rho: float
    kkt_residual: float
    iterations: int
    converged: bool = True
    objective: float = float("nan")
    objective_trace: Optional[np.ndarray] = None


def glasso_objective(theta, S, rho) -> float:
    """Penalized log-likelihood (to be maximized); diagonal not penalized."""
    sign, logdet = np.linalg.slogdet(theta)
    if sign <= 0:
        return -np.inf
    off = np.abs(theta).sum() - np.abs(np.diag(theta)).sum()
    return float(logdet - np.sum(theta * S) - rho * off)


def kkt_residual(theta, sigma, S, rho) -> float:
    """Largest violation of the stationarity conditions.

    Off the diagonal: ``|sigma - s - rho*sign(theta)|`` where ``theta != 0`` and
    ``max(0, |sigma - s| - rho)`` where ``theta == 0``; on the diagonal
    ``|sigma_hh - s_hh|``.
    """
    theta = np.asarray(theta)
    g = np.asarray(sigma) - np.asarray(S)
    nz = theta != 0
    res = np.where(nz, np.abs(g - rho * np.sign(theta)), np.maximum(0.0, np.abs(g) - rho))
    np.fill_diagonal(res, np.abs(np.diag(g)))
    return float(res.max())


@njit(cache=True)
def _logdet_pd(a):
    L = np.linalg.cholesky(a)
    s = 0.0
    for i in range(a.shape[0]):
        s += math.log(L[i, i])
    return 2.0 * s


@njit(cache=True)
def _objective(theta, S, rho):
    p = theta.shape[0]
    val = _logdet_pd(theta)
    for i in range(p):
        for j in range(p):
            val -= theta[i, j] * S[i, j]
            if i != j:
                val -= rho * abs(theta[i, j])
    return val


@njit(cache=True)
def _block_ascent(S, theta, W, rho, tol, max_sweeps, inner_max, trace):
    p = S.shape[0]
    scale = 0.0
    for i in range(p):
        scale += S[i, i]
    scale /= p
    base_tol = 1e-2 * tol / scale
    # inner solves only need to be as accurate as the current outer change;
    # coordinate descent from the current beta never lowers the objective
    inner_tol = 1e-3
    m = p - 1
    idx = np.empty(m, dtype=np.int64)
    A = np.empty((m, m))
    beta = np.empty(m)
    grad = np.empty(m)
    Ab = np.empty(m)
    trace[0] = _objective(theta, S, rho)
    converged = False
    sweeps = 0
    for sweep in range(max_sweeps):
        W_old = W.copy()
        for j in range(p):
            k = 0
            for i in range(p):
                if i != j:
                    idx[k] = i
                    k += 1
            wjj = W[j, j]
            s22 = S[j, j]
            # A = inverse of Theta without row/column j
            for a in range(m):
                ia = idx[a]
                for b in range(m):
                    ib = idx[b]
                    A[a, b] = W[ia, ib] - W[ia, j] * W[ib, j] / wjj
            for a in range(m):
                beta[a] = theta[idx[a], j]
            # gradient of 1/2 b'(s22 A)b + s12'b
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += A[a, b] * beta[b]
                grad[a] = s22 * acc + S[idx[a], j]
            for it in range(inner_max):
                max_step = 0.0
                for a in range(m):
                    h = s22 * A[a, a]
                    z = h * beta[a] - grad[a]
                    if z > rho:
                        new = (z - rho) / h
                    elif z < -rho:
                        new = (z + rho) / h
                    else:
                        new = 0.0
                    step = new - beta[a]
                    if step != 0.0:
                        for b in range(m):
                            grad[b] += s22 * A[b, a] * step
                        beta[a] = new
                        if abs(step) > max_step:
                            max_step = abs(step)
                if max_step < inner_tol:
                    break
            # closed-form diagonal entry and inverse update
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += A[a, b] * beta[b]
                Ab[a] = acc
            quad = 0.0
            for a in range(m):
                quad += beta[a] * Ab[a]
            c = 1.0 / s22
            theta[j, j] = c + quad
            for a in range(m):
                theta[idx[a], j] = beta[a]
                theta[j, idx[a]] = beta[a]
            for a in range(m):
                ia = idx[a]
                for b in range(m):
                    W[ia, idx[b]] = A[a, b] + Ab[a] * Ab[b] / c
                W[ia, j] = -Ab[a] / c
                W[j, ia] = -Ab[a] / c
            W[j, j] = 1.0 / c
        sweeps = sweep + 1
        trace[sweeps] = _objective(theta, S, rho)
        # refresh W to stop drift of the rank-one updates
        W[:, :] = np.linalg.inv(theta)
        for i in range(p):
            for k in range(i + 1, p):
                v = 0.5 * (W[i, k] + W[k, i])
                W[i, k] = v
                W[k, i] = v
        delta = np.max(np.abs(W - W_old))
        inner_tol = max(base_tol, 1e-2 * delta / (scale * scale))
        if delta < tol * scale:
            converged = True
            break
    return sweeps, converged


def _check_cov(S):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"S must be square, got shape {S.shape}")
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError("S must be symmetric")
    if np.any(np.diag(S) <= 0):
        raise NotPositiveDefiniteError("S must have a strictly positive diagonal")
    S = 0.5 * (S + S.T)
    lam_min = np.linalg.eigvalsh(S)[0]
    if lam_min < -1e-10 * np.abs(np.diag(S)).max():
        raise NotPositiveDefiniteError(f"S is not positive semidefinite (smallest eigenvalue {lam_min:.3g})")
    return S, lam_min


def _inverse_pd(theta):
    L = np.linalg.cholesky(theta)
    Li = np.linalg.solve(L, np.eye(theta.shape[0]))
    sigma = Li.T @ Li
    return 0.5 * (sigma + sigma.T)


def glasso_fit(S, rho: float, warm: Optional[GlassoSolution] = None,
               cfg: GlassoConfig = GlassoConfig()) -> GlassoSolution:
    """Fit the graphical lasso to a covariance-like matrix ``S``.

    ``warm`` (any object with a positive definite ``theta``) seeds the
    iterations; the cold start is ``diag(1 / s_hh)``.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    S, lam_min = _check_cov(S)
    p = S.shape[0]
    if rho == 0:
        if lam_min <= 1e-12 * np.abs(np.diag(S)).max():
            raise NotPositiveDefiniteError("rho = 0 requires a positive definite S")
        theta = _inverse_pd(S)
        theta = 0.5 * (theta + theta.T)
        sigma = _inverse_pd(theta)
        return GlassoSolution(theta, sigma, 0.0, kkt_residual(theta, sigma, S, 0.0), 0, True,
                              glasso_objective(theta, S, 0.0), None)
    if p == 1:
        theta = np.array([[1.0 / S[0, 0]]])
        return GlassoSolution(theta, S.copy(), float(rho), 0.0, 0, True, glasso_objective(theta, S, rho), None)

    if warm is not None and np.asarray(warm.theta).shape == (p, p):
        theta = np.array(warm.theta, dtype=float)
        try:
            W = _inverse_pd(theta)
        except np.linalg.LinAlgError:
            theta = np.diag(1.0 / np.diag(S))
            W = np.diag(np.diag(S)).astype(float)
    else:
        theta = np.diag(1.0 / np.diag(S))
        W = np.diag(np.diag(S)).astype(float)
    theta = np.ascontiguousarray(theta)
    W = np.ascontiguousarray(W)
    trace = np.full(cfg.max_sweeps + 1, np.nan)
    sweeps, converged = _block_ascent(S, theta, W, float(rho), cfg.tol, cfg.max_sweeps, cfg.inner_max, trace)
    theta = 0.5 * (theta + theta.T)
    sigma = _inverse_pd(theta)
    if not converged:
        warnings.warn(f"graphical lasso did not converge in {cfg.max_sweeps} sweeps (rho={rho:g})",
                      RuntimeWarning, stacklevel=2)
    trace = trace[: sweeps + 1]
    return GlassoSolution(theta, sigma, float(rho), kkt_residual(theta, sigma, S, rho), sweeps,
                          bool(converged), float(trace[-1]), trace)
