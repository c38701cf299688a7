"""Data model for interval-censored multivariate observations.

A dataset stores an ``n x p`` value matrix together with a censoring
indicator ``R`` taking values in {-1, 0, +1}: ``-1`` marks an entry below its
lower detection limit, ``+1`` an entry above its upper limit and ``0`` an
observed value. Censored entries carry no value (NaN in ``values``).

Indices are zero-based throughout the package.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import DataError, NotPositiveDefiniteError

LEFT = -1
OBSERVED = 0
RIGHT = 1

NA_TOKEN = "NA"


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CensoringBounds:
    """Lower and upper detection limits.

    ``lower``/``upper`` are either length-``p`` vectors (common limits) or
    ``n x p`` matrices (per-observation limits). Infinite entries mean the
    corresponding side is never censored.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.lower)
        up = _frozen(self.upper)
        if lo.shape != up.shape or lo.ndim not in (1, 2):
            raise DataError(f"bounds shape mismatch: lower {lo.shape}, upper {up.shape}")
        if np.isnan(lo).any() or np.isnan(up).any():
            raise DataError("bounds must not contain NaN")
        if not np.all(lo < up):
            bad = np.argwhere(~(lo < up))[0].tolist()
            raise DataError(f"lower bound must be strictly below upper bound (at {bad})")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @classmethod
    def uniform(cls, p: int, lower=-np.inf, upper=np.inf) -> "CensoringBounds":
        """Bounds broadcast from scalars (or length-p sequences)."""
        lo = np.broadcast_to(np.asarray(lower, dtype=float), (p,))
        up = np.broadcast_to(np.asarray(upper, dtype=float), (p,))
        return cls(lo, up)

    @property
    def p(self) -> int:
        return self.lower.shape[-1]

    @property
    def per_observation(self) -> bool:
        return self.lower.ndim == 2

    def row(self, i: int):
        """Return ``(lower, upper)`` vectors that apply to observation ``i``."""
        if self.per_observation:
            return self.lower[i], self.upper[i]
        return self.lower, self.upper

    def matrices(self, n: int):
        """Return ``(L, U)`` broadcast to ``n x p``."""
        if self.per_observation:
            if self.lower.shape[0] != n:
                raise DataError(f"per-observation bounds have {self.lower.shape[0]} rows, data has {n}")
            return self.lower, self.upper
        shape = (n, self.p)
        return np.broadcast_to(self.lower, shape), np.broadcast_to(self.upper, shape)

    def shifted(self, a) -> "CensoringBounds":
        return CensoringBounds(self.lower + a, self.upper + a)


@dataclass(frozen=True)
class PatternPartition:
    """Observed / left-censored / right-censored index sets of one row."""

    o: np.ndarray
    c_minus: np.ndarray
    c_plus: np.ndarray

    @property
    def c(self) -> np.ndarray:
        return np.sort(np.concatenate([self.c_minus, self.c_plus]))

    @property
    def p(self) -> int:
        return len(self.o) + len(self.c_minus) + len(self.c_plus)


@dataclass(frozen=True)
class CensoredDataset:
    values: np.ndarray
    indicator: np.ndarray
    bounds: CensoringBounds
    names: tuple = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        ind = np.asarray(self.indicator)
        if values.ndim != 2 or ind.shape != values.shape:
            raise DataError(f"values {values.shape} and indicator {ind.shape} must be matching 2-D arrays")
        if not np.isin(ind, (LEFT, OBSERVED, RIGHT)).all():
            raise DataError("indicator entries must be -1, 0 or +1")
        ind = ind.astype(np.int8)
        n, p = values.shape
        if self.bounds.p != p:
            raise DataError(f"bounds describe {self.bounds.p} variables, data has {p}")
        L, U = self.bounds.matrices(n)
        obs = ind == OBSERVED
        if not np.isfinite(values[obs]).all():
            raise DataError("observed entries must be finite")
        if np.any(values[obs] < L[obs]) or np.any(values[obs] > U[obs]):
            raise DataError("observed entries must lie inside [lower, upper]")
        if np.any((ind == RIGHT) & ~np.isfinite(U)) or np.any((ind == LEFT) & ~np.isfinite(L)):
            raise DataError("censored entry on a side with an infinite bound")
        values[~obs] = np.nan
        values.setflags(write=False)
        ind.setflags(write=False)
        names = self.names
        if names is None:
            names = tuple(f"X{h + 1}" for h in range(p))
        names = tuple(str(s) for s in names)
        if len(names) != p:
            raise DataError(f"expected {p} variable names, got {len(names)}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "indicator", ind)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(self.indicator))

    def to_raw(self) -> np.ndarray:
        """Values with censored entries replaced by -inf / +inf."""
        raw = np.array(self.values)
        raw[self.indicator == LEFT] = -np.inf
        raw[self.indicator == RIGHT] = np.inf
        return raw

    def shifted(self, a) -> "CensoredDataset":
        """Translate every value and both bounds by the vector ``a``."""
        a = np.broadcast_to(np.asarray(a, dtype=float), (self.p,))
        return CensoredDataset(self.values + a, self.indicator, self.bounds.shifted(a), self.names)


def encode_censoring(raw, bounds: CensoringBounds, na_side=None, names=None) -> CensoredDataset:
    """Build a :class:`CensoredDataset` from raw measurements.

    Entries above ``upper`` become right-censored, entries below ``lower``
    left-censored; values equal to a bound stay observed. NaN entries are
    missing markers whose side is taken from ``na_side`` (``"left"``,
    ``"right"``, or a per-column sequence of those / of -1 and +1). Without
    ``na_side`` the side is inferred when exactly one bound of the column is
    finite.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise DataError(f"raw data must be 2-D, got shape {raw.shape}")
    n, p = raw.shape
    if bounds.p != p:
        raise DataError(f"bounds describe {bounds.p} variables, data has {p}")
    L, U = bounds.matrices(n)

    ind = np.zeros((n, p), dtype=np.int8)
    with np.errstate(invalid="ignore"):
        ind[raw > U] = RIGHT
        ind[raw < L] = LEFT

    missing = np.isnan(raw)
    if missing.any():
        sides = _resolve_na_side(na_side, p)
        for h in np.unique(np.nonzero(missing)[1]):
            side = sides[h]
            rows = missing[:, h]
            label = names[h] if names is not None else f"column {h}"
            if side == 0:
                finite_l = np.isfinite(L[rows, h]).all()
                finite_u = np.isfinite(U[rows, h]).all()
                if finite_u and not finite_l:
                    side = RIGHT
                elif finite_l and not finite_u:
                    side = LEFT
                else:
                    raise DataError(f"{label}: cannot decide censoring side for missing values; declare it")
            bound = U if side == RIGHT else L
            if not np.isfinite(bound[rows, h]).all():
                raise DataError(f"{label}: missing values declared {'right' if side == RIGHT else 'left'}"
                                "-censored but that bound is infinite")
            ind[rows, h] = side
    return CensoredDataset(raw, ind, bounds, names)


def _resolve_na_side(na_side, p):
    table = {"left": LEFT, "right": RIGHT, "-1": LEFT, "+1": RIGHT, "1": RIGHT, -1: LEFT, 1: RIGHT, None: 0, "auto": 0}
    if na_side is None or isinstance(na_side, (str, int)):
        try:
            return [table[na_side]] * p
        except KeyError:
            raise DataError(f"unknown censoring side {na_side!r}") from None
    sides = list(na_side)
    if len(sides) != p:
        raise DataError(f"expected {p} censoring sides, got {len(sides)}")
    try:
        return [table[s] for s in sides]
    except KeyError as exc:
        raise DataError(f"unknown censoring side {exc.args[0]!r}") from None


def partition_row(dataset: CensoredDataset, i: int) -> PatternPartition:
    if not 0 <= i < dataset.n:
        raise IndexError(f"row index {i} out of range for {dataset.n} rows")
    r = dataset.indicator[i]
    return PatternPartition(
        o=np.flatnonzero(r == OBSERVED),
        c_minus=np.flatnonzero(r == LEFT),
        c_plus=np.flatnonzero(r == RIGHT),
    )


@dataclass(frozen=True)
class ModelParams:
    """Mean vector and precision matrix, with the covariance cached."""

    mu: np.ndarray
    theta: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float, copy=True)
        theta = np.array(self.theta, dtype=float, copy=True)
        p = mu.shape[0]
        if mu.ndim != 1 or theta.shape != (p, p):
            raise DataError(f"mu {mu.shape} and theta {theta.shape} are inconsistent")
        theta = 0.5 * (theta + theta.T)
        try:
            chol = np.linalg.cholesky(theta)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("theta is not positive definite") from None
        sigma = self.sigma
        if sigma is None:
            inv_chol = np.linalg.solve(chol, np.eye(p))
            sigma = inv_chol.T @ inv_chol
        sigma = np.array(sigma, dtype=float, copy=True)
        sigma = 0.5 * (sigma + sigma.T)
        for a in (mu, theta, sigma):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", sigma)

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def diagonal(cls, mu, variances) -> "ModelParams":
        variances = np.asarray(variances, dtype=float)
        return cls(mu, np.diag(1.0 / variances), np.diag(variances))


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _parse_float(tok: str, where: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise DataError(f"{where}: cannot parse {tok!r} as a number") from None


def read_csv(path, lower=None, upper=None, na_side=None) -> CensoredDataset:
    """Read a dataset written in the package CSV format.

    The first row holds variable names. Rows whose first cell is ``#lower`` or
    ``#upper`` carry the bounds (``p`` values after the tag); ``lower`` and
    ``upper`` arguments (scalars or length-p sequences) override them.
    Cells equal to ``NA`` are censored on the side given by ``na_side``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    names = [c.strip() for c in rows[0]]
    p = len(names)
    data, tagged = [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        first = row[0].strip()
        if first.startswith("#"):
            tag = first[1:].lower()
            if tag not in ("lower", "upper"):
                raise DataError(f"{path}:{lineno}: unknown tag row {first!r}")
            cells = row[1:]
            if len(cells) != p:
                raise DataError(f"{path}:{lineno}: expected {p} bound values, got {len(cells)}")
            tagged[tag] = [_parse_float(c.strip(), f"{path}:{lineno}") for c in cells]
            continue
        if len(row) != p:
            raise DataError(f"{path}:{lineno}: expected {p} fields, got {len(row)}")
        data.append([np.nan if c.strip() == NA_TOKEN else _parse_float(c.strip(), f"{path}:{lineno}")
                     for c in row])
    if not data:
        raise DataError(f"{path}: no observations")
    raw = np.array(data, dtype=float)
    lo = lower if lower is not None else tagged.get("lower", -np.inf)
    up = upper if upper is not None else tagged.get("upper", np.inf)
    try:
        bounds = CensoringBounds.uniform(p, lo, up)
    except ValueError as exc:
        raise DataError(f"invalid bounds: {exc}") from None
    all_missing = [names[h] for h in range(p) if np.isnan(raw[:, h]).all()]
    if all_missing:
        raise DataError(f"column {all_missing[0]!r} has no observed values")
    return encode_censoring(raw, bounds, na_side=na_side, names=names)


def write_csv(dataset: CensoredDataset, path) -> None:
    """Write ``dataset`` so that :func:`read_csv` reproduces it exactly.

    Censored cells are written as ``NA`` when the column has a single finite
    bound (the side is then implied) and as ``-inf``/``inf`` otherwise.
    """
    if dataset.bounds.per_observation:
        raise DataError("per-observation bounds cannot be stored in the CSV format")
    lo, up = dataset.bounds.lower, dataset.bounds.upper
    implied = np.isfinite(lo) ^ np.isfinite(up)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset.names)
        w.writerow(["#lower"] + [_fmt(x) for x in lo])
        w.writerow(["#upper"] + [_fmt(x) for x in up])
        for i in range(dataset.n):
            row = []
            for h in range(dataset.p):
                r = dataset.indicator[i, h]
                if r == OBSERVED:
                    row.append(_fmt(dataset.values[i, h]))
                elif implied[h]:
                    row.append(NA_TOKEN)
                else:
                    row.append("inf" if r == RIGHT else "-inf")
            w.writerow(row)
