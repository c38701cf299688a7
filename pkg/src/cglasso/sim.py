"""Synthetic censored data, baseline estimators, path metrics and study runner."""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .em import EMConfig
from .exceptions import CglassoError, DataError
from .glasso import glasso_fit
from .model_core import OBSERVED, CensoredDataset, CensoringBounds, encode_censoring
from .path import fit_path, rho_grid, select
from .trunc_moments import GibbsConfig

log = logging.getLogger(__name__)

STUDIES = ("model1", "model2", "model3", "approx_vs_exact", "censor_robustness")
METHODS = ("cglasso", "lod-glasso", "mar-em")


@dataclass(frozen=True)
class SimSpec:
    p: int
    n: int
    edge_prob: float
    H: int
    u: float = 40.0
    censor_prob: float = 0.5
    other_censor_prob: Optional[float] = None  # None: uncensored means drawn from mu_range
    mu_range: tuple = (10.0, 35.0)
    seed: int = 0

    def __post_init__(self):
        if self.p < 1 or self.n < 1:
            raise ValueError("p and n must be positive")
        if not 0 < self.edge_prob < 1:
            raise ValueError("edge_prob must lie in (0, 1)")
        if not 0 <= self.H <= self.p:
            raise ValueError("H must lie in [0, p]")
        if not 0 < self.censor_prob < 1:
            raise ValueError("censor_prob must lie in (0, 1)")
        if self.other_censor_prob is not None and not 0 < self.other_censor_prob < 1:
            raise ValueError("other_censor_prob must lie in (0, 1)")

    @property
    def bounds(self) -> CensoringBounds:
        return CensoringBounds.uniform(self.p, -np.inf, self.u)


@dataclass(frozen=True)
class Truth:
    mu: np.ndarray
    theta: np.ndarray
    adjacency: np.ndarray
    censored_vars: np.ndarray
    latent: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _as_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_sparse_precision(p: int, edge_prob: float, seed=0, low: float = 0.3, high: float = 0.7,
                         margin: float = 0.3) -> np.ndarray:
    """Random sparse precision matrix with smallest eigenvalue ``margin``.

    Upper-triangle support is i.i.d. Bernoulli(``edge_prob``); nonzero values
    are uniform on ``[low, high]`` with a random sign. The diagonal is
    ``|lambda_min(B)| + margin`` where ``B`` is the off-diagonal part.
    """
    rng = _as_rng(seed)
    iu = np.triu_indices(p, 1)
    m = len(iu[0])
    support = rng.random(m) < edge_prob
    vals = rng.uniform(low, high, m) * rng.choice([-1.0, 1.0], m)
    B = np.zeros((p, p))
    B[iu] = np.where(support, vals, 0.0)
    B = B + B.T
    lam = np.linalg.eigvalsh(B)[0] if p > 1 else 0.0
    return B + (abs(lam) + margin) * np.eye(p)


def mu_for_censor_prob(u: float, sigma: float, prob: float) -> float:
    """Mean giving ``P(X > u) = prob`` for ``X ~ N(mu, sigma^2)``."""
    if not 0 < prob < 1:
        raise ValueError("prob must lie in (0, 1)")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    # u - sigma * ndtri(1 - prob), written to stay accurate for tiny prob
    return float(u + sigma * ndtri(prob))


def gen_censored_sample(spec: SimSpec, theta=None, rng=None):
    """Draw a right-censored sample; returns ``(dataset, truth)``.

    The ``H`` censored variables are a random subset; their means are set so
    that each is censored with probability ``censor_prob``. The remaining
    means are drawn from ``mu_range``, or set to censoring probability
    ``other_censor_prob`` when given.
    """
    rng = _as_rng(spec.seed if rng is None else rng)
    if theta is None:
        theta = gen_sparse_precision(spec.p, spec.edge_prob, rng)
    theta = np.asarray(theta, dtype=float)
    sigma = np.linalg.inv(theta)
    sigma = 0.5 * (sigma + sigma.T)
    sd = np.sqrt(np.diag(sigma))
    D = np.sort(rng.choice(spec.p, size=spec.H, replace=False))
    mu = np.empty(spec.p)
    rest = np.setdiff1d(np.arange(spec.p), D)
    for h in D:
        mu[h] = mu_for_censor_prob(spec.u, sd[h], spec.censor_prob)
    if spec.other_censor_prob is None:
        mu[rest] = rng.uniform(*spec.mu_range, size=len(rest))
    else:
        for h in rest:
            mu[h] = mu_for_censor_prob(spec.u, sd[h], spec.other_censor_prob)
    L = np.linalg.cholesky(sigma)
    X = mu + rng.standard_normal((spec.n, spec.p)) @ L.T
    dataset = encode_censoring(X, spec.bounds)
    adjacency = (theta != 0) & ~np.eye(spec.p, dtype=bool)
    return dataset, Truth(mu, theta, adjacency, D, X)


def censor_top_fraction(X, q: float) -> CensoredDataset:
    """Right-censor the largest ``q`` fraction of each column of ``X``.

    The bound of column ``h`` is the value just below its censored block, so
    that at least ``1 - q`` of each column stays observed.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    k = int(round(q * n))
    if not 0 <= k < n - 1:
        raise ValueError("q must leave at least two observed values per column")
    if k == 0:
        return encode_censoring(X, CensoringBounds.uniform(p, -np.inf, np.inf))
    srt = np.sort(X, axis=0)
    upper = srt[n - k - 1]
    return encode_censoring(X, CensoringBounds(np.full(p, -np.inf), upper))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass
class SimplePath:
    rhos: np.ndarray
    thetas: list
    mus: Optional[list] = None
    S: Optional[np.ndarray] = None


def lod_impute(dataset: CensoredDataset) -> np.ndarray:
    """Replace every censored entry by the bound it was censored at."""
    L, U = dataset.bounds.matrices(dataset.n)
    X = np.array(dataset.values)
    r = dataset.indicator
    X = np.where(r == 1, U, np.where(r == -1, L, X))
    return X


def baseline_lod_glasso(dataset: CensoredDataset, rhos=None, K: int = 30, rho_min: float = 1e-3,
                        spacing: str = "linear") -> SimplePath:
    """Graphical lasso path on the covariance of limit-of-detection imputed data."""
    X = lod_impute(dataset)
    if not np.all(np.isfinite(X)):
        raise DataError("limit-of-detection imputation needs finite bounds on every censored side")
    S = np.cov(X.T, bias=True).reshape(dataset.p, dataset.p)
    flat = np.flatnonzero(np.diag(S) <= 0)
    if len(flat):
        raise DataError(f"column {dataset.names[flat[0]]!r} has zero variance after imputation")
    if rhos is None:
        off = np.abs(S - np.diag(np.diag(S)))
        rhos = rho_grid(float(off.max()), rho_min, K, spacing)
    thetas = []
    warm = None
    for rho in rhos:
        warm = glasso_fit(S, rho, warm=warm)
        thetas.append(warm.theta)
    return SimplePath(np.asarray(rhos), thetas, [X.mean(axis=0)] * len(thetas), S)


def baseline_mar_em(dataset: CensoredDataset, rhos=None, K: int = 30, rho_min: float = 1e-3,
                    spacing: str = "linear", cfg: EMConfig = EMConfig()):
    """Penalized EM treating censored entries as missing at random."""
    return fit_path(dataset, K=K, rho_min=rho_min, spacing=spacing, mode="mar", cfg=cfg, rhos=rhos)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def roc_points(adjacency, thetas):
    """Per-path-point (TPR, FPR) of the estimated off-diagonal support."""
    adjacency = np.asarray(adjacency, dtype=bool)
    iu = np.triu_indices(adjacency.shape[0], 1)
    truth = adjacency[iu]
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    tpr, fpr = [], []
    for theta in thetas:
        est = np.asarray(theta)[iu] != 0
        tp = int(np.sum(est & truth))
        fp = int(np.sum(est & ~truth))
        tpr.append(tp / n_pos if n_pos else 1.0)
        fpr.append(fp / n_neg if n_neg else 0.0)
    return np.array(tpr), np.array(fpr)


def path_auc(tpr, fpr) -> float:
    """Trapezoid area under the path-traced ROC points plus the origin."""
    pts = sorted(zip(np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr])))
    f = np.array([a for a, _ in pts])
    t = np.array([b for _, b in pts])
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))


def metrics(truth: Truth, path) -> dict:
    """MSE curves, their minima, ROC points and AUC of a path against the truth."""
    thetas = list(path.thetas)
    mus = getattr(path, "mus", None)
    mse_theta = np.array([np.sum((t - truth.theta) ** 2) for t in thetas])
    mse_mu = None if mus is None else np.array([np.sum((m - truth.mu) ** 2) for m in mus])
    tpr, fpr = roc_points(truth.adjacency, thetas)
    return {
        "rhos": np.asarray(path.rhos),
        "mse_mu": mse_mu,
        "mse_theta": mse_theta,
        "min_mse_mu": None if mse_mu is None else float(mse_mu.min()),
        "min_mse_theta": float(mse_theta.min()),
        "tpr": tpr,
        "fpr": fpr,
        "auc": path_auc(tpr, fpr),
    }


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    study: str
    replicates: int = 20
    seed: int = 0
    p: int = 50
    n: int = 100
    k: float = 3.0
    H: int = 25
    u: float = 40.0
    censor_prob: float = 0.5
    K: int = 30
    rho_min: float = 1e-3
    spacing: str = "linear"
    D_sizes: tuple = (2, 5)
    levels: tuple = (0.1, 0.2, 0.3)
    gibbs_sweeps: int = 10_000
    gibbs_burn_in: int = 500

    @property
    def edge_prob(self) -> float:
        return self.k / self.p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["D_sizes"] = list(self.D_sizes)
        d["levels"] = list(self.levels)
        return d


PRESETS = {
    "model1": dict(p=50, n=100, k=3, H=25, censor_prob=0.5),
    "model2": dict(p=50, n=100, k=1, H=30, censor_prob=0.5),
    "model3": dict(p=200, n=100, k=3, H=100, censor_prob=0.5),
    "approx_vs_exact": dict(p=10, n=100, k=1, censor_prob=0.25, replicates=10),
    "censor_robustness": dict(p=39, n=118, k=2, H=0, replicates=10),
}

_TYPES = {f: type(v) for f, v in StudyConfig("x").to_dict().items()}


def study_config(study: str, **overrides) -> StudyConfig:
    """Preset configuration of ``study`` with ``overrides`` applied (``None`` ignored)."""
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; expected one of {', '.join(STUDIES)}")
    values = dict(PRESETS[study])
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("D_sizes", "levels"):
        if key in values:
            values[key] = tuple(values[key])
    return StudyConfig(study, **values)


def load_study_config(path) -> StudyConfig:
    """Read a ``[study]`` section of ``key = value`` lines.

    Recognized keys are the fields of :class:`StudyConfig`; ``D_sizes`` and
    ``levels`` are comma-separated lists.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # ``k`` and ``K`` are different fields
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "study" not in parser:
        raise ValueError(f"{path}: missing [study] section")
    sec = parser["study"]
    if "study" not in sec:
        raise ValueError(f"{path}: missing key 'study'")
    out = {}
    for key, raw in sec.items():
        if key == "study":
            continue
        name = key if key in _TYPES else None
        if name is None:
            raise ValueError(f"{path}: unknown key {key!r}")
        kind = _TYPES[name]
        if kind is list:
            item = float if name == "levels" else int
            out[name] = tuple(item(x) for x in raw.split(",") if x.strip())
        else:
            out[name] = kind(raw)
    return study_config(sec["study"], **out)


def replicate_seed(seed: int, r: int) -> int:
    """Seed of replicate ``r``; depends only on the master seed and ``r``."""
    return int(np.random.SeedSequence(seed, spawn_key=(r,)).generate_state(1, np.uint64)[0])


def _certificates(path) -> dict:
    """Worst stationarity and fixed-point residuals over the converged fits of a path."""
    fits = [f for f in getattr(path, "fits", []) if getattr(f, "converged", False)]
    if not fits:
        return {"n_converged": 0, "max_kkt": None, "max_fp_rel": None}
    return {
        "n_converged": len(fits),
        "max_kkt": max(float(f.kkt_residual) for f in fits),
        "max_fp_rel": max(float(f.fixed_point_residual) / (1.0 + float(np.abs(f.params.mu).max()))
                          for f in fits),
    }


def _estimator_replicate(cfg: StudyConfig, r: int, em_cfg: EMConfig):
    seed = replicate_seed(cfg.seed, r)
    spec = SimSpec(cfg.p, cfg.n, cfg.edge_prob, cfg.H, cfg.u, cfg.censor_prob, seed=seed)
    dataset, truth = gen_censored_sample(spec)
    rows, curves, timings = [], [], []
    for method in METHODS:
        t0 = time.process_time()
        if method == "cglasso":
            path = fit_path(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing,
                            mode="meanfield", cfg=em_cfg, rng=seed)
        elif method == "lod-glasso":
            path = baseline_lod_glasso(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing)
        else:
            path = baseline_mar_em(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing, cfg=em_cfg)
        elapsed = time.process_time() - t0
        m = metrics(truth, path)
        if method == "lod-glasso":
            m["min_mse_mu"] = None  # limit-of-detection glasso has no mean estimate
        rows.append({"replicate": r, "method": method, "auc": m["auc"], "min_mse_mu": m["min_mse_mu"],
                     "min_mse_theta": m["min_mse_theta"], "n_censored": dataset.n_censored,
                     "complete": bool(getattr(path, "complete", True)), **_certificates(path)})
        for k, rho in enumerate(m["rhos"]):
            curves.append({"replicate": r, "method": method, "index": k, "rho": float(rho),
                           "tpr": float(m["tpr"][k]), "fpr": float(m["fpr"][k])})
        timings.append({"replicate": r, "method": method, "cpu_s": elapsed})
    return rows, curves, timings


def _approx_exact_replicate(cfg: StudyConfig, r: int, em_cfg: EMConfig):
    rows, curves, timings = [], [], []
    gibbs = GibbsConfig(n_sweeps=cfg.gibbs_sweeps, burn_in=cfg.gibbs_burn_in)
    exact_cfg = replace(em_cfg, gibbs=gibbs)
    for D in cfg.D_sizes:
        seed = replicate_seed(cfg.seed, r * 1000 + D)
        spec = SimSpec(cfg.p, cfg.n, cfg.edge_prob, D, cfg.u, cfg.censor_prob,
                       other_censor_prob=1e-11, seed=seed)
        dataset, truth = gen_censored_sample(spec)
        t0 = time.process_time()
        approx = fit_path(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing,
                          mode="meanfield", cfg=em_cfg, rng=seed)
        t1 = time.process_time()
        exact = fit_path(dataset, mode="exact", cfg=exact_cfg, rng=seed, rhos=approx.rhos)
        t2 = time.process_time()
        dmu = [float(np.sum((a - e) ** 2)) for a, e in zip(approx.mus, exact.mus)]
        dth = [float(np.sum((a - e) ** 2)) for a, e in zip(approx.thetas, exact.thetas)]
        rows.append({"replicate": r, "D": D, "max_dmu2": max(dmu), "max_dtheta2": max(dth),
                     "n_censored": dataset.n_censored,
                     "complete": bool(approx.complete and exact.complete)})
        for k, rho in enumerate(approx.rhos):
            curves.append({"replicate": r, "D": D, "index": k, "rho": float(rho),
                           "dmu2": dmu[k], "dtheta2": dth[k]})
        timings.append({"replicate": r, "D": D, "cpu_s_meanfield": t1 - t0, "cpu_s_exact": t2 - t1})
    return rows, curves, timings


def _robustness_replicate(cfg: StudyConfig, r: int, em_cfg: EMConfig):
    seed = replicate_seed(cfg.seed, r)
    spec = SimSpec(cfg.p, cfg.n, cfg.edge_prob, 0, np.inf, 0.5, seed=seed)
    full, truth = gen_censored_sample(spec)
    X = truth.latent
    rows, curves, timings = [], [], []
    for q in cfg.levels:
        dataset = censor_top_fraction(X, q)
        cens = dataset.indicator != OBSERVED
        for method in METHODS:
            t0 = time.process_time()
            if method == "cglasso":
                path = fit_path(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing,
                                mode="meanfield", cfg=em_cfg, rng=seed)
            elif method == "lod-glasso":
                path = baseline_lod_glasso(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing)
            else:
                path = baseline_mar_em(dataset, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing, cfg=em_cfg)
            elapsed = time.process_time() - t0
            m = metrics(truth, path)
            if method == "lod-glasso":
                imputed = lod_impute(dataset)
            else:
                k = select(path.abic)
                imputed = path.fits[k].suffstats.completed
            err = float(np.sqrt(np.sum((imputed[cens] - X[cens]) ** 2)))
            rows.append({"replicate": r, "level": q, "method": method, "auc": m["auc"],
                         "imputation_error": err, "n_censored": int(cens.sum()),
                         "complete": bool(getattr(path, "complete", True))})
            for k, rho in enumerate(m["rhos"]):
                curves.append({"replicate": r, "level": q, "method": method, "index": k, "rho": float(rho),
                               "tpr": float(m["tpr"][k]), "fpr": float(m["fpr"][k])})
            timings.append({"replicate": r, "level": q, "method": method, "cpu_s": elapsed})
    return rows, curves, timings


_RUNNERS = {
    "model1": _estimator_replicate,
    "model2": _estimator_replicate,
    "model3": _estimator_replicate,
    "approx_vs_exact": _approx_exact_replicate,
    "censor_robustness": _robustness_replicate,
}


def _run_one(args):
    cfg, r, em_cfg = args
    try:
        return r, _RUNNERS[cfg.study](cfg, r, em_cfg), None
    except (CglassoError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return r, None, f"{type(exc).__name__}: {exc}"


@dataclass
class BenchReport:
    config: dict
    replicates: list
    curves: list
    aggregate: dict
    failures: list = field(default_factory=list)
    timings: list = field(default_factory=list)


def _mean_sd(values):
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None, None
    a = np.array(sorted(vals), dtype=float)
    sd = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return float(a.mean()), sd


def aggregate(study: str, rows: list) -> dict:
    """Mean and standard deviation of each metric, grouped as in the report layout."""
    if study == "approx_vs_exact":
        keys, metrics_ = ("D",), ("max_dmu2", "max_dtheta2")
    elif study == "censor_robustness":
        keys, metrics_ = ("level", "method"), ("auc", "imputation_error")
    else:
        keys, metrics_ = ("method",), ("min_mse_mu", "min_mse_theta", "auc")
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for gkey in sorted(groups, key=lambda t: tuple(str(x) for x in t)):
        g = groups[gkey]
        entry = dict(zip(keys, gkey))
        entry["replicates"] = len(g)
        for m in metrics_:
            mean, sd = _mean_sd([row[m] for row in g])
            entry[f"{m}_mean"] = mean
            entry[f"{m}_sd"] = sd
        out.append(entry)
    return {"groups": out}


def run_study(study, replicates: Optional[int] = None, seed: Optional[int] = None, threads: int = 1,
              em_cfg: EMConfig = EMConfig(), **overrides) -> BenchReport:
    """Run a simulation study.

    ``study`` is a study name or a :class:`StudyConfig`. Replicates run in
    ``threads`` worker processes (0 means one per CPU); seeds are derived per
    replicate and results are reassembled in replicate order, so the report
    does not depend on the worker count. Failed replicates are logged,
    excluded and listed in ``failures``.
    """
    if isinstance(study, StudyConfig):
        cfg = replace(study, **{k: v for k, v in dict(replicates=replicates, seed=seed).items() if v is not None})
    else:
        cfg = study_config(study, replicates=replicates, seed=seed, **overrides)
    if cfg.replicates < 1:
        raise ValueError("replicates must be positive")
    jobs = [(cfg, r, em_cfg) for r in range(cfg.replicates)]
    workers = (os.cpu_count() or 1) if threads == 0 else threads
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    results.sort(key=lambda t: t[0])
    rows, curves, timings, failures = [], [], [], []
    for r, res, err in results:
        if res is None:
            log.warning("replicate %d failed: %s", r, err)
            failures.append({"replicate": r, "error": err})
            continue
        rows.extend(res[0])
        curves.extend(res[1])
        timings.extend(res[2])
    agg = aggregate(cfg.study, rows)
    agg["n_failed"] = len(failures)
    return BenchReport(cfg.to_dict(), rows, curves, agg, failures, timings)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _csv_text(rows: list, header_line: str) -> str:
    buf = io.StringIO()
    buf.write(header_line + "\n")
    if rows:
        fields = list(rows[0].keys())
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_report(report: BenchReport, outdir, version: str) -> dict:
    """Write ``replicates.csv``, ``aggregate.json``, ``roc.csv`` (or ``curves.csv``)
    and ``timings.csv`` to ``outdir``; returns the paths written.

    All files except ``timings.csv`` depend only on the configuration and seed.
    """
    os.makedirs(outdir, exist_ok=True)
    header = "# cglasso " + version + " config=" + json.dumps(report.config, sort_keys=True)
    curve_name = "curves.csv" if report.config["study"] == "approx_vs_exact" else "roc.csv"
    paths = {
        "replicates": os.path.join(outdir, "replicates.csv"),
        "aggregate": os.path.join(outdir, "aggregate.json"),
        "curves": os.path.join(outdir, curve_name),
        "timings": os.path.join(outdir, "timings.csv"),
    }
    with open(paths["replicates"], "w") as fh:
        fh.write(_csv_text(report.replicates, header))
    with open(paths["curves"], "w") as fh:
        fh.write(_csv_text(report.curves, header))
    with open(paths["timings"], "w") as fh:
        fh.write(_csv_text(report.timings, header))
    doc = {"version": version, "config": report.config, "aggregate": report.aggregate,
           "failures": report.failures}
    with open(paths["aggregate"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
