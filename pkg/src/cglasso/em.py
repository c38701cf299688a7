"""EM estimation of the censored graphical lasso.

The E-step completes every censored entry with moments of the conditional
Gaussian law truncated to its censoring region, giving ``xbar(mu, Theta)`` and
``S(mu, Theta)``; the M-step sets ``mu = xbar`` and solves a graphical lasso
on ``S``. Three E-step modes share the same skeleton:

``exact``
    full multivariate truncated moments (closed form for one censored
    component or an independent block, Gibbs sampling otherwise; this makes
    the algorithm a Monte Carlo EM with common random numbers).
``meanfield``
    cross moments replaced by products of first moments; univariate
    computations only. By default every censored entry gets the factorized
    (fixed-point) truncated law; ``EMConfig(meanfield="marginal")`` uses the
    marginal truncated law of each entry instead.
``mar``
    untruncated conditional moments, i.e. censored entries treated as
    missing at random (baseline estimator).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .exceptions import DegenerateRegionError, IllConditionedError, NumericalError
from .glasso import GlassoConfig, glasso_fit, kkt_residual
from .model_core import LEFT, OBSERVED, RIGHT, CensoredDataset, ModelParams
from .trunc_moments import (
    LOG_PROB_FLOOR,
    ConditionalGaussian,
    GibbsConfig,
    TruncRegion,
    _log_interval_mass,
    _nb_meanfield,
    gibbs_trunc_moments,
    region_probability,
    univ_trunc_stats,
)

log = logging.getLogger(__name__)

MODES = ("exact", "meanfield", "mar")


@dataclass(frozen=True)
class EMConfig:
    tol: float = 1e-5
    max_iter: int = 500
    kkt_tol: float = 1e-4
    glasso: GlassoConfig = GlassoConfig()
    gibbs: GibbsConfig = GibbsConfig()
    psd_floor: float = 1e-10
    psd_target: float = 1e-8
    loglik_draws: int = 20_000
    threads: int = 1
    meanfield: str = "fixed_point"
    meanfield_tol: float = 1e-13
    meanfield_max_sweeps: int = 10_000


@dataclass(frozen=True)
class SuffStats:
    xbar: np.ndarray
    S: np.ndarray
    psd_shift: float = 0.0
    completed: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    rho: float
    em_iterations: int
    converged: bool
    q_value: float
    kkt_residual: float
    suffstats: SuffStats
    fixed_point_residual: float = float("nan")
    mode: str = "meanfield"
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Pattern plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Group:
    """Rows sharing one censoring pattern."""

    rows: np.ndarray
    o: np.ndarray
    c: np.ndarray
    side: np.ndarray
    lower: np.ndarray  # (len(rows), |c|) truncation interval of each censored entry
    upper: np.ndarray


@dataclass(frozen=True)
class RowPlan:
    n: int
    p: int
    values: np.ndarray
    groups: tuple
    full_rows: np.ndarray
    indicator: np.ndarray
    entry_rows: np.ndarray  # coordinates of the censored entries, row-major order
    entry_cols: np.ndarray
    entry_lower: np.ndarray  # truncation interval of each censored entry
    entry_upper: np.ndarray
    thresholds: np.ndarray  # n x p censoring threshold of each censored entry, nan elsewhere


def build_plan(dataset: CensoredDataset) -> RowPlan:
    """Group the rows of ``dataset`` by censoring pattern."""
    ind = dataset.indicator
    L, U = dataset.bounds.matrices(dataset.n)
    keys, inverse = np.unique(ind, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    groups = []
    full = []
    for g, key in enumerate(keys):
        rows = np.flatnonzero(inverse == g)
        c = np.flatnonzero(key != OBSERVED)
        if len(c) == 0:
            full.append(rows)
            continue
        o = np.flatnonzero(key == OBSERVED)
        side = key[c].astype(np.int64)
        lo = np.where(side == RIGHT, U[np.ix_(rows, c)], -np.inf)
        hi = np.where(side == LEFT, L[np.ix_(rows, c)], np.inf)
        groups.append(_Group(rows, o, c, side, lo, hi))
    full_rows = np.sort(np.concatenate(full)) if full else np.empty(0, dtype=np.int64)
    er, ec = np.nonzero(ind != OBSERVED)
    side = ind[er, ec]
    elo = np.where(side == RIGHT, U[er, ec], -np.inf)
    ehi = np.where(side == LEFT, L[er, ec], np.inf)
    thr = np.where(ind == RIGHT, U, np.where(ind == LEFT, L, np.nan))
    return RowPlan(dataset.n, dataset.p, np.array(dataset.values), tuple(groups), full_rows,
                   np.ascontiguousarray(ind, dtype=np.int64), er, ec, elo, ehi, thr)


@njit(cache=True)
def _row_conditionals(theta, mu, X, ind, want_cov):
    """Conditional mean and variance of every censored entry given the
    observed entries of its row; optionally the summed conditional
    covariance blocks."""
    n, p = X.shape
    cmean = np.full((n, p), np.nan)
    cvar = np.full((n, p), np.nan)
    csum = np.zeros((p, p))
    c = np.empty(p, dtype=np.int64)
    o = np.empty(p, dtype=np.int64)
    for i in range(n):
        nc = 0
        no = 0
        for h in range(p):
            if ind[i, h] != 0:
                c[nc] = h
                nc += 1
            else:
                o[no] = h
                no += 1
        if nc == 0:
            continue
        T = np.empty((nc, nc))
        r = np.zeros(nc)
        for a in range(nc):
            for b in range(nc):
                T[a, b] = theta[c[a], c[b]]
            acc = 0.0
            for b in range(no):
                acc += theta[c[a], o[b]] * (X[i, o[b]] - mu[o[b]])
            r[a] = acc
        Li = np.linalg.inv(np.linalg.cholesky(T))
        C = Li.T @ Li
        shift = C @ r
        for a in range(nc):
            cmean[i, c[a]] = mu[c[a]] - shift[a]
            cvar[i, c[a]] = C[a, a]
            if want_cov:
                for b in range(nc):
                    csum[c[a], c[b]] += C[a, b]
    return cmean, cvar, csum


@njit(cache=True)
def _meanfield_rows(theta, mu, X, ind, thr, tol, max_sweeps):
    """Fixed-point mean-field completion of every censored block, in place.

    Returns per-entry variances, per-entry log tail masses, the first row
    whose iteration did not converge (or -1).
    """
    n, p = X.shape
    V = np.zeros((n, p))
    LZ = np.zeros((n, p))
    failed = -1
    c = np.empty(p, dtype=np.int64)
    for i in range(n):
        nc = 0
        for h in range(p):
            if ind[i, h] != 0:
                c[nc] = h
                nc += 1
        if nc == 0:
            continue
        P = np.empty((nc, nc))
        b = np.empty(nc)
        side = np.empty(nc, dtype=np.int64)
        t = np.empty(nc)
        m = np.empty(nc)
        for a in range(nc):
            h = c[a]
            acc = 0.0
            for k in range(p):
                if ind[i, k] == 0:
                    acc -= theta[h, k] * (X[i, k] - mu[k])
            for bb in range(nc):
                P[a, bb] = theta[h, c[bb]]
                acc += theta[h, c[bb]] * mu[c[bb]]
            b[a] = acc
            side[a] = ind[i, h]
            t[a] = thr[i, h]
            m[a] = thr[i, h]
        v = np.empty(nc)
        lz = np.empty(nc)
        if _nb_meanfield(P, b, side, t, m, v, lz, tol, max_sweeps) < 0 and failed < 0:
            failed = i
        for a in range(nc):
            X[i, c[a]] = m[a]
            V[i, c[a]] = v[a]
            LZ[i, c[a]] = lz[a]
    return V, LZ, failed


def _row_rng(seed, row):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(row)])


def _conditional_block(params: ModelParams, g: _Group, X):
    """Conditional means (rows x |c|) and covariance of the censored block."""
    theta = params.theta
    t_cc = theta[np.ix_(g.c, g.c)]
    try:
        factor = cho_factor(t_cc, lower=True, check_finite=False)
    except LinAlgError:
        raise IllConditionedError(f"precision block {g.c.tolist()} is singular") from None
    cov = cho_solve(factor, np.eye(len(g.c)), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    mean = np.broadcast_to(params.mu[g.c], (len(g.rows), len(g.c))).copy()
    if len(g.o):
        dev = X[np.ix_(g.rows, g.o)] - params.mu[g.o]
        mean -= cho_solve(factor, theta[np.ix_(g.c, g.o)] @ dev.T, check_finite=False).T
    return mean, cov, t_cc


def _check_logz(logz, g: _Group):
    bad = logz < LOG_PROB_FLOOR
    if np.any(bad):
        r = int(g.rows[np.nonzero(bad)[0][0]])
        raise DegenerateRegionError("censoring region has numerically zero probability", row=r)


# ---------------------------------------------------------------------------
# E-step / M-step
# ---------------------------------------------------------------------------

def e_step(dataset: CensoredDataset, params: ModelParams, mode: str = "meanfield", rng=0,
           cfg: EMConfig = EMConfig(), plan: Optional[RowPlan] = None) -> SuffStats:
    """Conditional-moment completion of the data.

    ``rng`` is the master seed of the exact mode; observation ``i`` always
    draws from the stream seeded by ``(rng, i)``, so results do not depend on
    the number of worker threads.
    """
    if mode not in MODES:
        raise ValueError(f"unknown E-step mode {mode!r}")
    if plan is None:
        plan = build_plan(dataset)
    n, p = plan.n, plan.p
    X = np.array(plan.values)
    csum = np.zeros((p, p))
    gibbs_jobs = []

    if len(plan.entry_rows) and mode == "meanfield" and cfg.meanfield == "fixed_point":
        V, LZ, failed = _meanfield_rows(np.ascontiguousarray(params.theta), params.mu, X, plan.indicator,
                                        plan.thresholds, cfg.meanfield_tol, cfg.meanfield_max_sweeps)
        er, ec = plan.entry_rows, plan.entry_cols
        bad = LZ[er, ec] < LOG_PROB_FLOOR
        if np.any(bad):
            raise DegenerateRegionError("censoring region has numerically zero probability",
                                        row=int(er[np.flatnonzero(bad)[0]]))
        if failed >= 0:
            raise NumericalError(f"row {failed}: mean-field iteration did not converge")
        csum[np.diag_indices(p)] += np.bincount(ec, weights=V[er, ec], minlength=p)
    elif len(plan.entry_rows):
        try:
            cmean, cvar, ccov = _row_conditionals(np.ascontiguousarray(params.theta), params.mu, X,
                                                  plan.indicator, mode == "mar")
        except np.linalg.LinAlgError:
            raise IllConditionedError("a censored block of the precision matrix is singular") from None
        er, ec = plan.entry_rows, plan.entry_cols
        if mode == "mar":
            X[er, ec] = cmean[er, ec]
            csum = ccov
        else:
            keep = np.ones(len(er), dtype=bool)
            if mode == "exact":
                gibbs_rows = np.zeros(n, dtype=bool)
                for g in plan.groups:
                    t_cc = params.theta[np.ix_(g.c, g.c)]
                    if len(g.c) > 1 and np.any(t_cc - np.diag(np.diag(t_cc))):
                        gibbs_rows[g.rows] = True
                keep = ~gibbs_rows[er]
            m1, v, logz = univ_trunc_stats(cmean[er, ec], cvar[er, ec], plan.entry_lower,
                                           plan.entry_upper, check=False)
            bad = logz < LOG_PROB_FLOOR
            if np.any(bad):
                raise DegenerateRegionError("censoring region has numerically zero probability",
                                            row=int(er[np.flatnonzero(bad)[0]]))
            X[er[keep], ec[keep]] = m1[keep]
            csum[np.diag_indices(p)] += np.bincount(ec[keep], weights=v[keep], minlength=p)
            if mode == "exact" and not keep.all():
                start = np.full((n, p), np.nan)
                start[er, ec] = m1
                for g in plan.groups:
                    if not gibbs_rows[g.rows[0]]:
                        continue
                    mean, cov, t_cc = _conditional_block(params, g, X)
                    for k, i in enumerate(g.rows):
                        region = TruncRegion(g.side, np.where(g.side == RIGHT, g.lower[k], g.upper[k]))
                        gibbs_jobs.append((i, g.c, ConditionalGaussian(mean[k], t_cc, cov), region,
                                           start[i, g.c]))

    if gibbs_jobs:
        def run(job):
            i, c, cond, region, x0 = job
            m1, m2, _, _ = gibbs_trunc_moments(cond, region, cfg.gibbs, _row_rng(rng, i), x0=x0)
            return i, c, m1, m2

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                results = list(ex.map(run, gibbs_jobs))
        else:
            results = [run(job) for job in gibbs_jobs]
        for i, c, m1, m2 in results:
            X[i, c] = m1
            csum[np.ix_(c, c)] += m2 - np.outer(m1, m1)

    xbar = X.mean(axis=0)
    D = X - xbar
    S = (D.T @ D + csum) / n
    S = 0.5 * (S + S.T)
    shift = 0.0
    if mode == "meanfield" and p > 1:
        lam = np.linalg.eigvalsh(S)[0]
        if lam < cfg.psd_floor:
            shift = cfg.psd_target - lam
            S = S + shift * np.eye(p)
    return SuffStats(xbar, S, shift, X)


def q_function(theta, S, rho, mu=None, xbar=None) -> float:
    """Penalized expected complete-data objective maximized by the M-step.

    With ``mu`` and ``xbar`` the mean term ``-(xbar - mu)' Theta (xbar - mu)``
    is included; it vanishes at ``mu = xbar``.
    """
    sign, logdet = np.linalg.slogdet(theta)
    off = np.abs(theta).sum() - np.abs(np.diag(theta)).sum()
    val = logdet - np.sum(theta * S) - rho * off
    if mu is not None:
        d = np.asarray(xbar) - np.asarray(mu)
        val -= d @ theta @ d
    return float(val)


def m_step(stats: SuffStats, rho: float, warm=None, cfg: EMConfig = EMConfig()) -> ModelParams:
    sol = glasso_fit(stats.S, rho, warm=warm, cfg=cfg.glasso)
    return ModelParams(stats.xbar, sol.theta, sol.sigma)


def _max_abs_change(a: ModelParams, b: ModelParams):
    delta = max(np.abs(a.mu - b.mu).max(), np.abs(a.theta - b.theta).max())
    scale = 1.0 + max(np.abs(a.mu).max(), np.abs(a.theta).max())
    return float(delta), float(scale)


def fit_em(dataset: CensoredDataset, rho: float, init: Optional[ModelParams] = None,
           mode: str = "meanfield", cfg: EMConfig = EMConfig(), rng=0,
           plan: Optional[RowPlan] = None) -> FitResult:
    """Run EM at one penalty value.

    Stops when the largest change in ``(mu, Theta)`` is below
    ``tol * (1 + max|value|)``, the fixed-point residual
    ``max|xbar(mu, Theta) - mu|`` is below ``tol * (1 + max|mu|)`` and the
    graphical-lasso stationarity residual at the refreshed ``S`` is below
    ``kkt_tol``. Without convergence after ``max_iter`` iterations the last
    iterate is returned with ``converged=False``.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if plan is None:
        plan = build_plan(dataset)
    if init is None:
        from .path import rho_max
        _, init = rho_max(dataset, mode=mode, cfg=cfg, rng=rng, plan=plan)

    params = init
    stats = e_step(dataset, params, mode, rng, cfg, plan)
    q_trace, q_gain, delta_trace, shifts = [], [], [], []
    censored = bool(plan.groups)
    converged = False
    it = 0
    fp = kkt = float("nan")
    gcfg = cfg.glasso
    for it in range(1, cfg.max_iter + 1):
        if censored and delta_trace:
            # M-steps far from the EM fixed point need not be solved to full accuracy
            loose = min(1e-5, 1e-3 * delta_trace[-1] / scale)
            gcfg = replace(cfg.glasso, tol=max(cfg.glasso.tol, loose))
        new = m_step(stats, rho, warm=params, cfg=replace(cfg, glasso=gcfg))
        q_trace.append(q_function(new.theta, stats.S, rho))
        q_gain.append(q_trace[-1] - q_function(params.theta, stats.S, rho, params.mu, stats.xbar))
        shifts.append(stats.psd_shift)
        if censored:
            stats = e_step(dataset, new, mode, rng, cfg, plan)
        delta, scale = _max_abs_change(new, params)
        delta_trace.append(delta)
        params = new
        fp = float(np.abs(stats.xbar - params.mu).max())
        kkt = kkt_residual(params.theta, params.sigma, stats.S, rho)
        if not censored:
            converged = True
            break
        if (delta < cfg.tol * scale and fp <= cfg.tol * (1.0 + np.abs(params.mu).max())
                and kkt <= cfg.kkt_tol):
            converged = True
            break
    if not converged:
        log.warning("EM did not converge in %d iterations at rho=%g", cfg.max_iter, rho)
    diagnostics = {
        "q_trace": q_trace,
        "q_gain": q_gain,
        "delta_trace": delta_trace,
        "psd_shifts": shifts,
        "n_psd_repairs": int(sum(s > 0 for s in shifts)),
    }
    return FitResult(params, float(rho), it, converged, q_function(params.theta, stats.S, rho), kkt,
                     stats, fp, mode, diagnostics)


# ---------------------------------------------------------------------------
# Observed-data likelihood
# ---------------------------------------------------------------------------

def _gauss_logpdf_rows(dev, cov):
    """Row-wise multivariate normal log-density of deviations ``dev``."""
    k = dev.shape[1]
    if k == 0:
        return np.zeros(dev.shape[0])
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, dev.T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (np.sum(z * z, axis=0) + logdet + k * math.log(2.0 * math.pi))


def observed_loglik(dataset: CensoredDataset, params: ModelParams, n_draws: int = 20_000, rng=0,
                    plan: Optional[RowPlan] = None, return_se: bool = False):
    """Observed-data log-likelihood summed over rows.

    Rows with at most one censored entry are evaluated in closed form; larger
    censored blocks use the GHK estimator for the region probability, seeded
    per row. With ``return_se`` the Monte Carlo standard error is returned
    as well.
    """
    if plan is None:
        plan = build_plan(dataset)
    X = plan.values
    total = 0.0
    var_total = 0.0
    if len(plan.full_rows):
        total += _gauss_logpdf_rows(X[plan.full_rows] - params.mu, params.sigma).sum()
    for g in plan.groups:
        dev = X[np.ix_(g.rows, g.o)] - params.mu[g.o]
        total += _gauss_logpdf_rows(dev, params.sigma[np.ix_(g.o, g.o)]).sum()
        mean, cov, t_cc = _conditional_block(params, g, X)
        if len(g.c) == 1:
            sd = math.sqrt(cov[0, 0])
            logz = _log_interval_mass((g.lower[:, 0] - mean[:, 0]) / sd, (g.upper[:, 0] - mean[:, 0]) / sd)
            _check_logz(logz, g)
            total += logz.sum()
            continue
        for k, i in enumerate(g.rows):
            region = TruncRegion(g.side, np.where(g.side == RIGHT, g.lower[k], g.upper[k]))
            cond = ConditionalGaussian(mean[k], t_cc, cov)
            prob, se = region_probability(cond, region, n_draws, _row_rng(rng, i))
            if not prob > 1e-300:
                raise DegenerateRegionError("censoring region has numerically zero probability", row=int(i))
            total += math.log(prob)
            var_total += (se / prob) ** 2
    if return_se:
        return float(total), math.sqrt(var_total)
    return float(total)


def penalized_objective(dataset: CensoredDataset, params: ModelParams, rho: float, **kw) -> float:
    """Penalized observed log-likelihood on the graphical-lasso scale.

    Twice the average log-likelihood minus ``rho * sum_{h != k} |theta_hk|``:
    with this scaling the complete-data version is ``log det Theta -
    tr(Theta S)`` plus a constant, so the stationarity conditions are
    ``sigma_hk - s_hk = rho * v_hk`` and EM with the graphical-lasso M-step
    ascends it.
    """
    ll = observed_loglik(dataset, params, **kw)
    off = np.abs(params.theta).sum() - np.abs(np.diag(params.theta)).sum()
    return 2.0 * ll / dataset.n - rho * off
