"""Command-line driver: fit, path, select, simulate, benchmark and roc.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every artifact starts with (or contains) the library version and the resolved
configuration, and contains nothing run-dependent, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import __version__
from .em import MODES, EMConfig, fit_em
from .exceptions import DataError, NumericalError
from .model_core import read_csv, write_csv
from .path import bic_exact, fit_path, select
from .sim import STUDIES, SimSpec, gen_censored_sample, load_study_config, roc_points, run_study, \
    study_config, write_report
from .trunc_moments import GibbsConfig

log = logging.getLogger("cglasso")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    """Resolved options of ``fit``/``path``. Bounds stay as the strings given
    on the command line so the serialized form is exact."""

    input: str
    lower: Optional[str] = None
    upper: Optional[str] = None
    na_side: Optional[str] = None
    mode: str = "meanfield"
    rho: Optional[float] = None
    K: int = 30
    rho_min: float = 1e-3
    ratio: bool = False
    spacing: str = "linear"
    seed: int = 0
    criterion: str = "abic"
    bic: bool = False
    max_iter: int = 500
    gibbs_sweeps: int = 100_000
    gibbs_burn_in: int = 1_000
    out: str = "."
    threads: int = 1

    # output location and worker count do not change results
    _NOT_ECHOED = ("out", "threads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def echo(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in self._NOT_ECHOED}

    def em_config(self) -> EMConfig:
        gibbs = replace(GibbsConfig(), n_sweeps=self.gibbs_sweeps, burn_in=self.gibbs_burn_in)
        return EMConfig(max_iter=self.max_iter, gibbs=gibbs, threads=self.threads)


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def _clean(x):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _header(config: dict) -> str:
    return f"# cglasso {__version__} config={json.dumps(_clean(config), sort_keys=True)}\n"


def _write_edges(path, theta, names, config: dict) -> int:
    theta = np.asarray(theta)
    p = theta.shape[0]
    lines = [_header(config), "h\tk\tname_h\tname_k\ttheta\n"]
    for h in range(p):
        for k in range(h + 1, p):
            if theta[h, k] != 0:
                lines.append(f"{h}\t{k}\t{names[h]}\t{names[k]}\t{float(theta[h, k])!r}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)
    return len(lines) - 2


def _parse_bound(text):
    """Scalar or comma-separated list; ``inf``/``-inf`` accepted."""
    if text is None:
        return None
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse bound {text!r}") from None
    return vals[0] if len(vals) == 1 else vals


def _parse_side(text):
    if text is None or "," not in text:
        return text
    return [t.strip() for t in text.split(",")]


def _load(cfg: RunConfig):
    if not os.path.isfile(cfg.input):
        raise DataError(f"cannot read input file {cfg.input!r}")
    return read_csv(cfg.input, lower=_parse_bound(cfg.lower), upper=_parse_bound(cfg.upper),
                    na_side=_parse_side(cfg.na_side))


def _run_config(args, **extra) -> RunConfig:
    keys = {f.name for f in fields(RunConfig)}
    values = {k: v for k, v in vars(args).items() if k in keys and v is not None}
    values.update(extra)
    return RunConfig(**values)


def _fit_summary(fit) -> dict:
    return {
        "rho": fit.rho,
        "converged": fit.converged,
        "em_iterations": fit.em_iterations,
        "kkt_residual": fit.kkt_residual,
        "fixed_point_residual": fit.fixed_point_residual,
        "q_value": fit.q_value,
        "n_psd_repairs": fit.diagnostics.get("n_psd_repairs", 0),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args: argparse.Namespace) -> int:
    if args.rho is None:
        raise UsageError("--rho is required")
    cfg = _run_config(args)
    data = _load(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    fit = fit_em(data, cfg.rho, mode=cfg.mode, cfg=cfg.em_config(), rng=cfg.seed)
    doc = {
        "version": __version__,
        "config": cfg.echo(),
        "names": list(data.names),
        "n": data.n,
        "p": data.p,
        "n_censored": data.n_censored,
        "mu": fit.params.mu,
        "theta": fit.params.theta,
        "rho": fit.rho,
        "diagnostics": _fit_summary(fit),
    }
    _write_json(os.path.join(cfg.out, "params.json"), doc)
    n_edges = _write_edges(os.path.join(cfg.out, "edges.tsv"), fit.params.theta, data.names, cfg.echo())
    print(f"rho={fit.rho:g} edges={n_edges} iterations={fit.em_iterations} converged={fit.converged}")
    if not fit.converged:
        print(f"cglasso fit: EM did not converge in {fit.em_iterations} iterations "
              f"(kkt={fit.kkt_residual:.3g})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_path(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    if cfg.criterion not in ("abic", "bic"):
        raise UsageError(f"unknown criterion {cfg.criterion!r}")
    data = _load(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    em_cfg = cfg.em_config()
    path = fit_path(data, K=cfg.K, rho_min=cfg.rho_min, spacing=cfg.spacing, mode=cfg.mode, cfg=em_cfg,
                    rng=cfg.seed, ratio=cfg.ratio)
    if path.fits and (cfg.bic or cfg.criterion == "bic"):
        bic_exact(path, data, n_draws=em_cfg.loglik_draws, rng=cfg.seed)
    doc = {
        "version": __version__,
        "config": cfg.echo(),
        "names": list(data.names),
        "n": data.n,
        "p": data.p,
        "mode": cfg.mode,
        "rho_max": path.rho_max,
        "rhos": path.rhos,
        "edge_counts": path.edge_counts(),
        "abic": path.abic,
        "bic": path.bic,
        "selected": path.selected,
        "complete": path.complete,
        "error": path.error,
        "fits": [dict(_fit_summary(f), mu=f.params.mu, theta=f.params.theta) for f in path.fits],
    }
    _write_json(os.path.join(cfg.out, "path.json"), doc)
    if not path.fits:
        print(f"cglasso path: no path point could be fitted: {path.error}", file=sys.stderr)
        return EXIT_NUMERIC
    k = path.selected[cfg.criterion]
    n_edges = _write_edges(os.path.join(cfg.out, "edges.tsv"), path.fits[k].params.theta, data.names,
                           dict(cfg.echo(), selected_index=k, selected_rho=float(path.rhos[k])))
    print(f"points={len(path.fits)} rho_max={path.rho_max:g} selected[{cfg.criterion}]={k} "
          f"rho={path.rhos[k]:g} edges={n_edges}")
    if not path.complete:
        print(f"cglasso path: path stopped early at {path.error}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from None


def _path_doc(path) -> dict:
    doc = _read_json(path)
    if "fits" not in doc or "rhos" not in doc:
        raise DataError(f"{path}: not a path file")
    return doc


def cmd_select(args: argparse.Namespace) -> int:
    doc = _path_doc(args.path)
    values = doc.get(args.criterion)
    if values is None:
        raise DataError(f"{args.path}: criterion {args.criterion!r} was not computed; "
                        "rerun path with --bic")
    k = select([np.inf if v is None else v for v in values])
    fit = doc["fits"][k]
    config = {"path": args.path, "criterion": args.criterion, "path_config": doc.get("config")}
    os.makedirs(args.out, exist_ok=True)
    n_edges = _write_edges(os.path.join(args.out, "edges.tsv"), np.array(fit["theta"]), doc["names"],
                           dict(config, selected_index=k, selected_rho=doc["rhos"][k]))
    print(f"selected[{args.criterion}]={k} rho={doc['rhos'][k]:g} edges={n_edges}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        spec = SimSpec(p=args.p, n=args.n, edge_prob=args.edge_prob, H=args.H, u=args.u,
                       censor_prob=args.censor_prob, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data, truth = gen_censored_sample(spec)
    os.makedirs(args.out, exist_ok=True)
    write_csv(data, os.path.join(args.out, args.name))
    config = {k: v for k, v in asdict(spec).items() if k != "other_censor_prob"}
    doc = {
        "version": __version__,
        "config": config,
        "seed": spec.seed,
        "names": list(data.names),
        "mu": truth.mu,
        "theta": truth.theta,
        "adjacency": truth.adjacency.astype(int),
        "censored_vars": truth.censored_vars,
    }
    _write_json(os.path.join(args.out, "truth.json"), doc)
    print(f"n={data.n} p={data.p} censored_entries={data.n_censored} "
          f"edges={int(truth.adjacency.sum()) // 2}")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k) for k in ("p", "n", "k", "H", "K", "rho_min", "spacing")}
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"cannot read config file {args.config!r}")
        study = load_study_config(args.config)
        study = replace(study, **{k: v for k, v in overrides.items() if v is not None})
    else:
        if args.study is None:
            raise UsageError("give --study or --config")
        study = study_config(args.study, **overrides)
    report = run_study(study, replicates=args.replicates, seed=args.seed, threads=args.threads)
    paths = write_report(report, args.out, __version__)
    for g in report.aggregate["groups"]:
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in g.items()))
    print(f"wrote {', '.join(sorted(os.path.basename(p) for p in paths.values()))} to {args.out}")
    if report.failures:
        print(f"cglasso benchmark: {len(report.failures)} replicate(s) failed; see aggregate.json",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_roc(args: argparse.Namespace) -> int:
    truth = _read_json(args.truth)
    doc = _path_doc(args.path)
    if "adjacency" not in truth:
        raise DataError(f"{args.truth}: not a truth file")
    adj = np.array(truth["adjacency"], dtype=bool)
    thetas = [np.array(f["theta"]) for f in doc["fits"]]
    if any(t.shape != adj.shape for t in thetas):
        raise DataError("truth and path dimensions differ")
    tpr, fpr = roc_points(adj, thetas)
    config = {"truth": args.truth, "path": args.path, "path_config": doc.get("config"),
              "truth_config": truth.get("config")}
    lines = [_header(config), "rho,tpr,fpr\n"]
    lines += [f"{float(r)!r},{float(t)!r},{float(f)!r}\n" for r, t, f in zip(doc["rhos"], tpr, fpr)]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "roc.csv"), "w") as fh:
        fh.writelines(lines)
    print(f"points={len(thetas)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _data_flags(sp):
    sp.add_argument("input", help="CSV file (header of names, NA for censored cells, optional #lower/#upper rows)")
    sp.add_argument("--lower", help="lower detection limit(s): scalar or comma list; overrides #lower")
    sp.add_argument("--upper", help="upper detection limit(s): scalar or comma list; overrides #upper")
    sp.add_argument("--na-side", dest="na_side", help="side of NA cells: left, right, or comma list")
    sp.add_argument("--mode", choices=MODES, default="meanfield")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-iter", dest="max_iter", type=int, default=500)
    sp.add_argument("--gibbs-sweeps", dest="gibbs_sweeps", type=int, default=100_000)
    sp.add_argument("--gibbs-burn-in", dest="gibbs_burn_in", type=int, default=1_000)
    sp.add_argument("--threads", type=int, default=1, help="worker threads for the exact E-step (0 = auto)")
    sp.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cglasso", description="Sparse precision estimation for censored Gaussian data.")
    p.add_argument("--version", action="version", version=f"cglasso {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("fit", help="fit at a single penalty")
    _data_flags(s)
    s.add_argument("--rho", type=float, required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("path", help="fit a warm-started penalty path and select a model")
    _data_flags(s)
    s.add_argument("--K", type=int, default=30, help="number of penalty values")
    s.add_argument("--rho-min", dest="rho_min", type=float, default=1e-3)
    s.add_argument("--ratio", action="store_true", help="read --rho-min as a fraction of rho_max")
    s.add_argument("--spacing", choices=("linear", "log"), default="linear")
    s.add_argument("--criterion", choices=("abic", "bic"), default="abic")
    s.add_argument("--bic", action="store_true", help="also compute the likelihood-based BIC")
    s.set_defaults(func=cmd_path)

    s = sub.add_parser("select", help="select a model from a path.json")
    s.add_argument("path")
    s.add_argument("--criterion", choices=("abic", "bic"), default="abic")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("simulate", help="draw a censored dataset with known graph")
    s.add_argument("--p", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--edge-prob", dest="edge_prob", type=float, required=True)
    s.add_argument("--H", type=int, required=True, help="number of censored variables")
    s.add_argument("--u", type=float, default=40.0, help="upper detection limit")
    s.add_argument("--censor-prob", dest="censor_prob", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="data.csv")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("benchmark", help="run a simulation study")
    s.add_argument("--study", choices=STUDIES)
    s.add_argument("--config", help="INI file with a [study] section")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--k", type=float, help="expected neighbours per node")
    s.add_argument("--H", type=int)
    s.add_argument("--K", type=int)
    s.add_argument("--rho-min", dest="rho_min", type=float)
    s.add_argument("--spacing", choices=("linear", "log"))
    s.add_argument("--threads", type=int, default=1, help="worker processes (0 = auto)")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("roc", help="export ROC points of a path against a truth file")
    s.add_argument("--truth", required=True)
    s.add_argument("--path", required=True)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_roc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cglasso {args.cmd}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cglasso {args.cmd}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"cglasso {args.cmd}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"cglasso {args.cmd}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cglasso {args.cmd}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
