"""Solution paths over a decreasing penalty grid and BIC-based selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .em import EMConfig, FitResult, RowPlan, build_plan, e_step, fit_em, observed_loglik
from .exceptions import CglassoError, DataError
from .model_core import LEFT, OBSERVED, RIGHT, CensoredDataset, ModelParams
from .trunc_moments import univ_trunc_stats

log = logging.getLogger(__name__)


@dataclass
class PathResult:
    rhos: np.ndarray
    fits: list
    n: int
    p: int
    mode: str
    rho_max: float
    params0: ModelParams
    abic: Optional[np.ndarray] = None
    bic: Optional[np.ndarray] = None
    selected: dict = field(default_factory=dict)
    complete: bool = True
    error: Optional[str] = None

    @property
    def thetas(self):
        return [f.params.theta for f in self.fits]

    @property
    def mus(self):
        return [f.params.mu for f in self.fits]

    def edge_counts(self):
        return [n_offdiag_nonzero(t) // 2 for t in self.thetas]


def n_offdiag_nonzero(theta) -> int:
    """Number of nonzero off-diagonal entries, both triangles counted."""
    theta = np.asarray(theta)
    return int(np.count_nonzero(theta) - np.count_nonzero(np.diag(theta)))


# ---------------------------------------------------------------------------
# Largest penalty value
# ---------------------------------------------------------------------------

def univariate_censored_mle(dataset: CensoredDataset, h: int, tol: float = 1e-13, max_iter: int = 100_000):
    """Maximum likelihood ``(mu_h, sigma2_h)`` of column ``h`` under censoring.

    Maximizes the Tobit likelihood with observed, left- and right-censored
    contributions by a one-dimensional EM started at the observed-value
    moments.
    """
    r = dataset.indicator[:, h]
    x = dataset.values[r == OBSERVED, h]
    name = dataset.names[h]
    if len(x) == 0:
        raise DataError(f"column {name!r} is entirely censored")
    if len(x) < 2 or np.ptp(x) == 0:
        raise DataError(f"column {name!r} needs at least two distinct observed values")
    L, U = dataset.bounds.matrices(dataset.n)
    cens = r != OBSERVED
    lo = np.where(r[cens] == RIGHT, U[cens, h], -np.inf)
    hi = np.where(r[cens] == LEFT, L[cens, h], np.inf)
    n = dataset.n
    mu, s2 = float(x.mean()), float(x.var())
    if not cens.any():
        return mu, s2
    sx = x.sum()
    for _ in range(max_iter):
        m1, v, _ = univ_trunc_stats(mu, s2, lo, hi)
        new_mu = (sx + m1.sum()) / n
        new_s2 = (np.sum((x - new_mu) ** 2) + np.sum(v + (m1 - new_mu) ** 2)) / n
        done = abs(new_mu - mu) <= tol * (1.0 + abs(mu)) and abs(new_s2 - s2) <= tol * s2
        mu, s2 = float(new_mu), float(new_s2)
        if done:
            break
    else:
        log.warning("univariate censored MLE of column %s did not converge", name)
    return mu, s2


def tobit_loglik(dataset: CensoredDataset, h: int, mu: float, s2: float) -> float:
    """Univariate censored log-likelihood of column ``h``."""
    from scipy.special import log_ndtr

    r = dataset.indicator[:, h]
    sd = math.sqrt(s2)
    x = dataset.values[r == OBSERVED, h]
    L, U = dataset.bounds.matrices(dataset.n)
    ll = np.sum(-0.5 * ((x - mu) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi))
    ll += np.sum(log_ndtr(-(U[r == RIGHT, h] - mu) / sd))
    ll += np.sum(log_ndtr((L[r == LEFT, h] - mu) / sd))
    return float(ll)


def diagonal_start(dataset: CensoredDataset, mode: str = "meanfield") -> ModelParams:
    """Diagonal model of the largest penalty.

    Censoring-aware modes use the univariate censored MLEs; the ``mar`` mode
    uses mean and variance of the observed values only.
    """
    mus, s2s = [], []
    for h in range(dataset.p):
        if mode == "mar":
            x = dataset.values[dataset.indicator[:, h] == OBSERVED, h]
            if len(x) < 2 or np.ptp(x) == 0:
                raise DataError(f"column {dataset.names[h]!r} needs at least two distinct observed values")
            m, s = float(x.mean()), float(x.var())
        else:
            m, s = univariate_censored_mle(dataset, h)
        mus.append(m)
        s2s.append(s)
    return ModelParams.diagonal(mus, s2s)


def rho_max(dataset: CensoredDataset, mode: str = "meanfield", cfg: EMConfig = EMConfig(), rng=0,
            plan: Optional[RowPlan] = None):
    """Return ``(rho_max, params0)``: the smallest penalty giving a diagonal
    precision estimate and that diagonal estimate."""
    params0 = diagonal_start(dataset, mode)
    stats = e_step(dataset, params0, mode, rng, cfg, plan)
    S = stats.S
    off = np.abs(S - np.diag(np.diag(S)))
    return float(off.max()) if dataset.p > 1 else 0.0, params0


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def rho_grid(rho_hi: float, rho_lo: float, K: int, spacing: str = "linear") -> np.ndarray:
    if K < 2:
        raise ValueError("K must be at least 2")
    if not rho_lo < rho_hi:
        raise ValueError(f"rho_min ({rho_lo:g}) must be below rho_max ({rho_hi:g})")
    if spacing == "linear":
        return np.linspace(rho_hi, rho_lo, K)
    if spacing == "log":
        if rho_lo <= 0:
            raise ValueError("log spacing needs rho_min > 0")
        return np.geomspace(rho_hi, rho_lo, K)
    raise ValueError(f"unknown spacing {spacing!r}")


def fit_path(dataset: CensoredDataset, K: int = 30, rho_min: float = 1e-3, spacing: str = "linear",
             mode: str = "meanfield", cfg: EMConfig = EMConfig(), rng=0, ratio: bool = False,
             rhos=None) -> PathResult:
    """Fit a warm-started path from ``rho_max`` down to ``rho_min``.

    ``rho_min`` is absolute unless ``ratio`` is set, in which case it is a
    fraction of ``rho_max``. An explicit decreasing grid may be passed as
    ``rhos`` (its first value then replaces ``rho_max`` as the starting point).
    A failed fit stops the path; the partial result is returned with
    ``complete=False``.
    """
    plan = build_plan(dataset)
    rmax, params0 = rho_max(dataset, mode, cfg, rng, plan)
    if rhos is None:
        lo = rho_min * rmax if ratio else rho_min
        rhos = rho_grid(rmax, lo, K, spacing)
    rhos = np.asarray(rhos, dtype=float)
    if np.any(np.diff(rhos) >= 0):
        raise ValueError("rho grid must be strictly decreasing")
    result = PathResult(rhos, [], dataset.n, dataset.p, mode, rmax, params0)
    init = params0
    for k, rho in enumerate(rhos):
        try:
            fit = fit_em(dataset, rho, init=init, mode=mode, cfg=cfg, rng=rng, plan=plan)
        except CglassoError as exc:
            log.error("path aborted at rho[%d]=%g: %s", k, rho, exc)
            result.complete = False
            result.error = f"rho[{k}]={rho:g}: {exc}"
            result.rhos = rhos[:k]
            break
        result.fits.append(fit)
        init = fit.params
    if result.fits:
        result.abic = bic_approx(result)
        result.selected["abic"] = select(result.abic)
    return result


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------

def _complexity(p, n, theta):
    return (2 * p + n_offdiag_nonzero(theta)) * math.log(n) / n


def bic_exact(path: PathResult, dataset: CensoredDataset, n_draws: int = 20_000, rng=0) -> np.ndarray:
    """BIC from the observed-data log-likelihood of each path point."""
    plan = build_plan(dataset)
    n, p = dataset.n, dataset.p
    out = []
    for fit in path.fits:
        ll = observed_loglik(dataset, fit.params, n_draws=n_draws, rng=rng, plan=plan)
        out.append(-2.0 * ll / n + _complexity(p, n, fit.params.theta))
    path.bic = np.array(out)
    path.selected["bic"] = select(path.bic)
    return path.bic


def bic_approx(path: PathResult) -> np.ndarray:
    """BIC with the log-likelihood replaced by the M-step objective."""
    out = []
    for fit in path.fits:
        theta = fit.params.theta
        _, logdet = np.linalg.slogdet(theta)
        out.append(-logdet + np.sum(theta * fit.suffstats.S) + _complexity(path.p, path.n, theta))
    return np.array(out)


def select(values, criterion: Optional[str] = None) -> int:
    """Index minimizing a criterion; ties go to the larger penalty (earlier index).

    ``values`` is either a criterion vector or a :class:`PathResult` together
    with ``criterion`` (``"abic"`` or ``"bic"``).
    """
    if isinstance(values, PathResult):
        key = criterion or "abic"
        values = values.abic if key == "abic" else values.bic
        if values is None:
            raise ValueError(f"criterion {key!r} has not been computed for this path")
    values = np.asarray(values, dtype=float)
    return int(np.argmin(values))
