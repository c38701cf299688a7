"""Moments of Gaussian laws truncated to coordinate-aligned one-sided regions.

The region of a censored block is ``D_c = (-inf, l_{c-}) x (u_{c+}, +inf)``:
every component is restricted to one tail. Three engines are provided:

* closed-form univariate moments (Mills ratios, evaluated in log space);
* a Gibbs sampler for the multivariate case, driven by pre-drawn uniforms so
  that, for a fixed random stream, the result is a smooth deterministic
  function of the Gaussian parameters (this keeps Monte Carlo EM iterations
  convergent);
* an independent rejection sampler, used as a test oracle at small ``|c|``.

The mean-field variant replaces every cross moment by the product of first
moments and needs only univariate CDF evaluations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import log_ndtr, ndtr, ndtri

from .exceptions import DegenerateRegionError, IllConditionedError, NumericalError
from .model_core import LEFT, RIGHT, ModelParams, PatternPartition

PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = math.log(PROB_FLOOR)
TAIL_SWITCH = 8.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionalGaussian:
    """Law of ``X_c`` given ``X_o = x_o``."""

    mean: np.ndarray
    precision: np.ndarray
    covariance: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class TruncRegion:
    """Product of one-sided intervals: ``side[j] = -1`` means ``x_j < threshold[j]``,
    ``side[j] = +1`` means ``x_j > threshold[j]``."""

    side: np.ndarray
    threshold: np.ndarray

    def __post_init__(self):
        side = np.asarray(self.side, dtype=np.int64)
        thr = np.asarray(self.threshold, dtype=float)
        if side.shape != thr.shape or side.ndim != 1:
            raise ValueError("side and threshold must be matching vectors")
        if not np.isin(side, (LEFT, RIGHT)).all():
            raise ValueError("every component needs side -1 or +1")
        if not np.isfinite(thr).all():
            raise ValueError("thresholds must be finite")
        object.__setattr__(self, "side", side)
        object.__setattr__(self, "threshold", thr)

    @classmethod
    def from_partition(cls, part: PatternPartition, lower, upper) -> "TruncRegion":
        c = part.c
        side = np.where(np.isin(c, part.c_plus), RIGHT, LEFT)
        thr = np.where(side == RIGHT, np.asarray(upper)[c], np.asarray(lower)[c])
        return cls(side, thr)

    @property
    def dim(self) -> int:
        return self.side.shape[0]

    def intervals(self):
        lo = np.where(self.side == RIGHT, self.threshold, -np.inf)
        hi = np.where(self.side == LEFT, self.threshold, np.inf)
        return lo, hi

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.all(np.where(self.side == RIGHT, x > self.threshold, x < self.threshold), axis=-1)


@dataclass(frozen=True)
class TruncMoments:
    """First moments, second non-central moments and region mass.

    ``se_m1``/``se_m2`` are Monte Carlo standard errors (zero for closed-form
    results).
    """

    m1: np.ndarray
    m2: np.ndarray
    prob: float
    se_m1: Optional[np.ndarray] = None
    se_m2: Optional[np.ndarray] = None

    @property
    def cov(self) -> np.ndarray:
        return self.m2 - np.outer(self.m1, self.m1)


@dataclass(frozen=True)
class GibbsConfig:
    """Exact-engine settings: ``n_chains`` independent chains of ``n_sweeps``
    retained sweeps each, after ``burn_in`` discarded sweeps."""

    n_sweeps: int = 100_000
    burn_in: int = 1_000
    n_chains: int = 1
    n_batches: int = 20
    prob_draws: int = 4096

    def __post_init__(self):
        if self.n_sweeps < self.n_batches or self.n_batches < 2:
            raise ValueError("need n_sweeps >= n_batches >= 2")
        if self.n_chains < 1 or self.burn_in < 0:
            raise ValueError("invalid chain configuration")


# ---------------------------------------------------------------------------
# Univariate closed forms
# ---------------------------------------------------------------------------

def _log1mexp(x):
    """log(1 - exp(x)) for x <= 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x > -math.log(2.0)
    with np.errstate(divide="ignore"):
        out[small] = np.log(-np.expm1(x[small]))
        out[~small] = np.log1p(-np.exp(x[~small]))
    return out


def _log_interval_mass(alpha, beta):
    """log(Phi(beta) - Phi(alpha)) without cancellation."""
    with np.errstate(invalid="ignore"):
        right = (alpha + beta) > 0
    la = np.where(right, log_ndtr(-alpha), log_ndtr(beta))
    lb = np.where(right, log_ndtr(-beta), log_ndtr(alpha))
    with np.errstate(invalid="ignore"):
        d = lb - la
    d = np.where(np.isneginf(lb), -np.inf, d)
    return la + _log1mexp(np.minimum(d, 0.0))


def _far_tail(alpha, depth=60):
    """For a right tail above ``alpha`` (large) return ``(delta, q)`` with
    ``lambda = alpha + delta`` the inverse Mills ratio and the variance factor
    ``1 - lambda * delta = delta * (q - delta)``, from the continued fraction
    ``1 / R(a) = a + 1/(a + 2/(a + 3/(a + ...)))``."""
    t = np.array(alpha, dtype=float, copy=True)
    for k in range(depth, 2, -1):
        t = alpha + k / t
    q = 2.0 / t
    delta = 1.0 / (alpha + q)
    return delta, q


def _std_trunc(alpha, beta):
    """Mean, variance and log-mass of a standard normal truncated to (alpha, beta)."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    alpha, beta = np.broadcast_arrays(alpha, beta)
    shape = alpha.shape
    alpha, beta = alpha.reshape(-1), beta.reshape(-1)
    logz = _log_interval_mass(alpha, beta)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        log_pa = -0.5 * alpha * alpha - _LOG_SQRT_2PI
        log_pb = -0.5 * beta * beta - _LOG_SQRT_2PI
        A = np.where(np.isfinite(alpha), np.exp(log_pa - logz), 0.0)
        B = np.where(np.isfinite(beta), np.exp(log_pb - logz), 0.0)
        aA = np.where(np.isfinite(alpha), alpha * A, 0.0)
        bB = np.where(np.isfinite(beta), beta * B, 0.0)
        mean = A - B
        var = 1.0 + (aA - bB) - mean * mean

    # one-sided tails far from the mean: continued fraction avoids cancellation
    right_far = np.isposinf(beta) & (alpha > TAIL_SWITCH)
    left_far = np.isneginf(alpha) & (beta < -TAIL_SWITCH)
    if right_far.any():
        a = alpha[right_far]
        delta, q = _far_tail(a)
        mean[right_far] = a + delta
        var[right_far] = delta * (q - delta)
    if left_far.any():
        b = -beta[left_far]
        delta, q = _far_tail(b)
        mean[left_far] = -(b + delta)
        var[left_far] = delta * (q - delta)
    # the untruncated case
    full = np.isneginf(alpha) & np.isposinf(beta)
    mean[full] = 0.0
    var[full] = 1.0
    return mean.reshape(shape), np.maximum(var, 0.0).reshape(shape), logz.reshape(shape)


def univ_trunc_stats(mean, variance, lower=-np.inf, upper=np.inf, check=True):
    """Vectorized truncated mean, variance and log-probability.

    With ``check`` a region whose probability is below ``PROB_FLOOR`` raises
    :class:`DegenerateRegionError`; otherwise callers inspect the returned
    log-probability themselves.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variance must be positive")
    sd = np.sqrt(variance)
    alpha = (np.asarray(lower, dtype=float) - mean) / sd
    beta = (np.asarray(upper, dtype=float) - mean) / sd
    if np.any(alpha >= beta):
        raise ValueError("empty truncation region")
    zm, zv, logz = _std_trunc(alpha, beta)
    if check and np.any(logz < LOG_PROB_FLOOR):
        bad = int(np.flatnonzero(np.ravel(logz < LOG_PROB_FLOOR))[0])
        raise DegenerateRegionError(f"truncation region probability below {PROB_FLOOR:g} (component {bad})")
    return mean + sd * zm, variance * zv, logz


def univ_trunc_moments(mean, variance, lower=-np.inf, upper=np.inf):
    """Return ``(m1, m2, prob)`` of ``N(mean, variance)`` truncated to
    ``(lower, upper)``; ``m2`` is the non-central second moment.

    >>> m1, m2, p = univ_trunc_moments(0.0, 1.0, upper=0.0)
    >>> round(float(m2), 12), round(float(p), 12)
    (1.0, 0.5)
    """
    m1, var, logz = univ_trunc_stats(mean, variance, lower, upper)
    m2 = var + m1 * m1
    if np.ndim(m1) == 0:
        return float(m1), float(m2), float(np.exp(logz))
    return m1, m2, np.exp(logz)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

def conditional_gaussian(params: ModelParams, part: PatternPartition, x_o) -> ConditionalGaussian:
    c, o = part.c, part.o
    if len(c) == 0:
        raise ValueError("partition has no censored components")
    theta = params.theta
    t_cc = theta[np.ix_(c, c)]
    try:
        factor = cho_factor(t_cc, lower=True, check_finite=False)
    except LinAlgError:
        raise IllConditionedError("precision block of the censored components is singular") from None
    if np.min(np.abs(np.diag(factor[0]))) ** 2 < 1e-12 * np.max(np.abs(np.diag(t_cc))):
        raise IllConditionedError("precision block of the censored components is near singular")
    cov = cho_solve(factor, np.eye(len(c)), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    mean = params.mu[c].copy()
    if len(o):
        x_o = np.asarray(x_o, dtype=float)
        mean -= cho_solve(factor, theta[np.ix_(c, o)] @ (x_o - params.mu[o]), check_finite=False)
    return ConditionalGaussian(mean, t_cc, cov)


# ---------------------------------------------------------------------------
# Normal CDF / quantile for compiled kernels
# ---------------------------------------------------------------------------

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@njit(cache=True)
def _nb_ndtr(x):
    return 0.5 * math.erfc(-x * _SQRT1_2)


@njit(cache=True)
def _nb_ndtri(p):
    """Wichura's AS241 (PPND16) normal quantile, about 1e-16 relative accuracy."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r
                    + 6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r
                  + 1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r
                + 1.3314166789178437745e+2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r
                    + 3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r
                  + 5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r
                + 4.2313330701600911252e+1) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    if r <= 0.0:
        return -math.inf if q < 0.0 else math.inf
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@njit(cache=True)
def _nb_right_tail(alpha, u):
    """Standard normal draw conditioned on ``Z > alpha`` by inversion of ``u``."""
    if alpha <= 0.0:
        lo = _nb_ndtr(alpha)
        return _nb_ndtri(lo + u * (1.0 - lo))
    if alpha < 37.0:
        return -_nb_ndtri((1.0 - u) * _nb_ndtr(-alpha))
    return math.sqrt(alpha * alpha - 2.0 * math.log1p(-u))


@njit(cache=True, nogil=True)
def _gibbs_kernel(mean, prec, side, thr, x0, uniforms, burn_in, n_batches):
    """Run ``n_chains`` Gibbs chains; return per-(chain, batch) sums of the
    centred draws ``x - mean`` and of their outer products."""
    n_chains, n_total, d = uniforms.shape
    n_keep = n_total - burn_in
    s1 = np.zeros((n_chains, n_batches, d))
    s2 = np.zeros((n_chains, n_batches, d, d))
    counts = np.zeros((n_chains, n_batches))
    sd = np.empty(d)
    for j in range(d):
        sd[j] = 1.0 / math.sqrt(prec[j, j])
    z = np.empty(d)
    for ch in range(n_chains):
        for j in range(d):
            z[j] = x0[j] - mean[j]
        for t in range(n_total):
            for j in range(d):
                acc = 0.0
                for k in range(d):
                    if k != j:
                        acc += prec[j, k] * z[k]
                cm = -acc / prec[j, j]
                a = (thr[j] - mean[j] - cm) / sd[j]
                u = uniforms[ch, t, j]
                if side[j] > 0:
                    e = _nb_right_tail(a, u)
                else:
                    e = -_nb_right_tail(-a, u)
                z[j] = cm + sd[j] * e
            if t >= burn_in:
                b = ((t - burn_in) * n_batches) // n_keep
                counts[ch, b] += 1.0
                for j in range(d):
                    s1[ch, b, j] += z[j]
                    for k in range(d):
                        s2[ch, b, j, k] += z[j] * z[k]
    return s1, s2, counts


def _uniforms(rng, shape):
    u = rng.random(shape)
    u[u == 0.0] = 2.0 ** -54
    return u


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# Multivariate engines
# ---------------------------------------------------------------------------

def _marginal_moments(cond: ConditionalGaussian, region: TruncRegion):
    lo, hi = region.intervals()
    var = np.diag(cond.covariance)
    return univ_trunc_stats(cond.mean, var, lo, hi)


def _factorized(cond, region, m1, var, logz):
    m2 = np.outer(m1, m1) + np.diag(var)
    zero = np.zeros_like(m2)
    return TruncMoments(m1, m2, float(np.exp(np.sum(logz))), np.zeros_like(m1), zero)


@njit(cache=True)
def _nb_right_stats(alpha):
    """Mean, variance and log-mass of a standard normal truncated to (alpha, inf)."""
    if alpha > TAIL_SWITCH:
        t = alpha
        for k in range(60, 2, -1):
            t = alpha + k / t
        q = 2.0 / t
        delta = 1.0 / (alpha + q)
        lam = alpha + delta
        return lam, delta * (q - delta), -0.5 * alpha * alpha - _LOG_SQRT_2PI - math.log(lam)
    tail = 0.5 * math.erfc(alpha / math.sqrt(2.0))
    lam = math.exp(-0.5 * alpha * alpha - _LOG_SQRT_2PI) / tail
    return lam, max(1.0 + alpha * lam - lam * lam, 0.0), math.log(tail)


@njit(cache=True)
def _nb_meanfield(P, b, side, thr, m, v, logz, tol, max_sweeps):
    """Coordinate-wise mean-field fixed point for ``N(P^{-1} b, P^{-1})``
    truncated to a one-sided product region.

    Factor ``h`` is the full conditional of component ``h`` (precision
    ``P[h, h]``) with the other components at their current means, truncated
    to its own tail. ``m`` holds the starting means and is updated in place
    together with ``v`` and ``logz``. Returns the number of sweeps, or -1
    without convergence.
    """
    k = b.shape[0]
    for sweep in range(max_sweeps):
        change = 0.0
        big = 0.0
        for h in range(k):
            acc = b[h]
            for j in range(k):
                if j != h:
                    acc -= P[h, j] * m[j]
            a = acc / P[h, h]
            sd = 1.0 / math.sqrt(P[h, h])
            if side[h] > 0:
                z, vz, lz = _nb_right_stats((thr[h] - a) / sd)
                new = a + sd * z
            else:
                z, vz, lz = _nb_right_stats((a - thr[h]) / sd)
                new = a - sd * z
            v[h] = vz * sd * sd
            logz[h] = lz
            d = abs(new - m[h])
            if d > change:
                change = d
            if abs(new) > big:
                big = abs(new)
            m[h] = new
        if change <= tol * (1.0 + big):
            return sweep + 1
    return -1


MEANFIELD_METHODS = ("fixed_point", "marginal")


def meanfield_trunc_moments(cond: ConditionalGaussian, region: TruncRegion, method: str = "fixed_point",
                            tol: float = 1e-13, max_sweeps: int = 10_000) -> TruncMoments:
    """Mean-field approximation: cross moments are products of first moments
    and every component has its own univariate truncated law.

    ``fixed_point`` (default) uses the factorized law closest to the truncated
    Gaussian: the law of component ``h`` is its full conditional, precision
    ``P[h, h]``, with the other components at their mean-field means, iterated
    to a fixed point. ``marginal`` uses each component's marginal law, with
    variance ``(P^{-1})_{hh}``, in a single pass. Both are exact when the block
    has one component or a diagonal precision.

    ``prob`` is the product of the marginal tail masses.
    """
    if method not in MEANFIELD_METHODS:
        raise ValueError(f"unknown mean-field method {method!r}")
    m1, var, logz = _marginal_moments(cond, region)
    if method == "fixed_point" and cond.dim > 1 and not _is_diagonal(cond.precision):
        P = np.ascontiguousarray(cond.precision, dtype=float)
        m = np.array(m1, dtype=float)
        v = np.empty_like(m)
        lz = np.empty_like(m)
        sweeps = _nb_meanfield(P, P @ cond.mean, region.side, region.threshold, m, v, lz, tol, max_sweeps)
        if sweeps < 0:
            raise NumericalError(f"mean-field iteration did not converge in {max_sweeps} sweeps")
        return _factorized(cond, region, m, v, logz)
    return _factorized(cond, region, m1, var, logz)


def _is_diagonal(a):
    return not np.any(a - np.diag(np.diag(a)))


def gibbs_trunc_moments(cond: ConditionalGaussian, region: TruncRegion,
                        cfg: GibbsConfig = GibbsConfig(), rng=None, x0=None):
    """Gibbs estimate of the truncated moments with batch-means standard errors."""
    rng = _as_rng(rng)
    d = cond.dim
    if x0 is None:
        x0, _, _ = _marginal_moments(cond, region)
    u = _uniforms(rng, (cfg.n_chains, cfg.burn_in + cfg.n_sweeps, d))
    s1, s2, counts = _gibbs_kernel(cond.mean, np.ascontiguousarray(cond.precision), region.side,
                                   region.threshold, np.asarray(x0, dtype=float), u, cfg.burn_in,
                                   cfg.n_batches)
    counts = counts.reshape(-1)
    b1 = s1.reshape(-1, d) / counts[:, None]
    b2 = s2.reshape(-1, d, d) / counts[:, None, None]
    mu = cond.mean
    # per-batch uncentred second moments (a linear map of the centred ones)
    b2 = b2 + mu[None, :, None] * b1[:, None, :] + b1[:, :, None] * mu[None, None, :] + np.outer(mu, mu)
    b1 = b1 + mu
    w = counts / counts.sum()
    m1 = w @ b1
    m2 = np.tensordot(w, b2, axes=1)
    nb = len(counts)
    se1 = np.sqrt(np.sum(w[:, None] ** 2 * (b1 - m1) ** 2, axis=0) * nb / (nb - 1))
    se2 = np.sqrt(np.sum(w[:, None, None] ** 2 * (b2 - m2) ** 2, axis=0) * nb / (nb - 1))
    m2 = 0.5 * (m2 + m2.T)
    return m1, m2, se1, se2


def exact_trunc_mvn_moments(cond: ConditionalGaussian, region: TruncRegion,
                            cfg: GibbsConfig = GibbsConfig(), rng=None) -> TruncMoments:
    """Truncated moments of the full multivariate law.

    One-dimensional and independent (diagonal precision) blocks are handled
    in closed form; otherwise the Gibbs engine is used and ``prob`` comes
    from the GHK estimator.
    """
    if cond.dim != region.dim:
        raise ValueError("dimension mismatch between law and region")
    m1, var, logz = _marginal_moments(cond, region)
    if cond.dim == 1 or _is_diagonal(cond.precision):
        return _factorized(cond, region, m1, var, logz)
    rng = _as_rng(rng)
    prob, _ = region_probability(cond, region, cfg.prob_draws, rng)
    g1, g2, se1, se2 = gibbs_trunc_moments(cond, region, cfg, rng, x0=m1)
    return TruncMoments(g1, g2, prob, se1, se2)


def rejection_trunc_moments(cond: ConditionalGaussian, region: TruncRegion, n_accept: int,
                            rng=None, batch: int = 1_000_000) -> TruncMoments:
    """Rejection sampler over the truncated law.

    The component with the smallest marginal mass is drawn exactly from its
    truncated marginal; the others are drawn from the untruncated conditional
    law given it, and the draw is kept when all of them fall in the region.
    """
    rng = _as_rng(rng)
    d = cond.dim
    lo, hi = region.intervals()
    sd = np.sqrt(np.diag(cond.covariance))
    logz1 = _log_interval_mass((lo - cond.mean) / sd, (hi - cond.mean) / sd)
    first = int(np.argmin(logz1))
    order = [first] + [j for j in range(d) if j != first]
    cov = cond.covariance[np.ix_(order, order)]
    mean = cond.mean[order]
    side = region.side[order]
    thr = region.threshold[order]
    if d > 1:
        beta = cov[1:, 0] / cov[0, 0]
        rest_cov = cov[1:, 1:] - np.outer(beta, cov[0, 1:])
        rest_chol = np.linalg.cholesky(0.5 * (rest_cov + rest_cov.T))
    alpha = (thr[0] - mean[0]) / sd[first]
    s1 = np.zeros(d)
    s2 = np.zeros((d, d))
    s4 = np.zeros((d, d))
    kept = 0
    accepted = 0
    proposed = 0
    while kept < n_accept:
        u = _uniforms(rng, batch)
        if side[0] == RIGHT:
            z = -ndtri((1.0 - u) * ndtr(-alpha)) if alpha > 0 else ndtri(ndtr(alpha) + u * ndtr(-alpha))
        else:
            z = ndtri(u * ndtr(alpha)) if alpha < 0 else -ndtri((1.0 - u) * ndtr(-alpha))
        x = np.empty((batch, d))
        x[:, 0] = mean[0] + sd[first] * z
        if d > 1:
            dev = x[:, :1] - mean[0]
            x[:, 1:] = mean[1:] + dev * beta + rng.standard_normal((batch, d - 1)) @ rest_chol.T
            ok = np.all(np.where(side[1:] == RIGHT, x[:, 1:] > thr[1:], x[:, 1:] < thr[1:]), axis=1)
            x = x[ok]
        proposed += batch
        accepted += len(x)
        if kept + len(x) > n_accept:
            x = x[: n_accept - kept]
        xc = x - mean
        s1 += xc.sum(axis=0)
        s2 += xc.T @ xc
        sq = x * x
        s4 += sq.T @ sq
        kept += len(x)
    z1 = s1 / kept
    z2 = s2 / kept
    inv = np.argsort(order)
    m1 = mean + z1
    m2 = z2 + np.outer(mean, z1) + np.outer(z1, mean) + np.outer(mean, mean)
    var1 = np.maximum(np.diag(z2) - z1 ** 2, 0.0)
    var2 = np.maximum(s4 / kept - m2 ** 2, 0.0)
    m1, m2 = m1[inv], m2[np.ix_(inv, inv)]
    se1 = np.sqrt(var1 / kept)[inv]
    se2 = np.sqrt(var2 / kept)[np.ix_(inv, inv)]
    prob = float(np.exp(logz1[first]) * accepted / proposed)
    return TruncMoments(m1, 0.5 * (m2 + m2.T), prob, se1, se2)


def region_probability(cond: ConditionalGaussian, region: TruncRegion, n_draws: int = 20_000, rng=None):
    """Estimate ``P(X in D)`` with the GHK sequential-conditioning estimator.

    Returns ``(prob, standard_error)``; exact (zero error) in one dimension.
    """
    d = cond.dim
    lo, hi = region.intervals()
    if d == 1:
        sd = math.sqrt(cond.covariance[0, 0])
        logz = _log_interval_mass(np.array([(lo[0] - cond.mean[0]) / sd]), np.array([(hi[0] - cond.mean[0]) / sd]))
        return float(np.exp(logz[0])), 0.0
    rng = _as_rng(rng)
    L = np.linalg.cholesky(cond.covariance)
    a = lo - cond.mean
    b = hi - cond.mean
    u = _uniforms(rng, (n_draws, d))
    eta = np.zeros((n_draws, d))
    logw = np.zeros(n_draws)
    for j in range(d):
        shift = eta[:, :j] @ L[j, :j]
        alpha = (a[j] - shift) / L[j, j]
        beta = (b[j] - shift) / L[j, j]
        lz = _log_interval_mass(alpha, beta)
        logw += lz
        if j < d - 1:
            if region.side[j] == RIGHT:
                eta[:, j] = -ndtri((1.0 - u[:, j]) * np.exp(lz))
                # guard against saturation in the far tail
                eta[:, j] = np.maximum(eta[:, j], alpha)
            else:
                eta[:, j] = ndtri(u[:, j] * np.exp(lz))
                eta[:, j] = np.minimum(eta[:, j], beta)
    w = np.exp(logw)
    prob = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(n_draws))
    return prob, se
