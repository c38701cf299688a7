"""Sparse precision estimation for censored Gaussian data (cglasso)."""

__version__ = "0.1.0"

from .em import EMConfig, FitResult, e_step, fit_em, observed_loglik, penalized_objective  # noqa: E402
from .exceptions import (  # noqa: E402
    CglassoError,
    DataError,
    DegenerateRegionError,
    IllConditionedError,
    NotPositiveDefiniteError,
    NumericalError,
)
from .glasso import GlassoConfig, glasso_fit  # noqa: E402
from .model_core import CensoredDataset, CensoringBounds, ModelParams, encode_censoring, read_csv, write_csv  # noqa: E402
from .path import PathResult, bic_approx, bic_exact, fit_path, rho_max, select  # noqa: E402

__all__ = [
    "__version__",
    "CensoredDataset",
    "CensoringBounds",
    "CglassoError",
    "DataError",
    "DegenerateRegionError",
    "EMConfig",
    "FitResult",
    "GlassoConfig",
    "IllConditionedError",
    "ModelParams",
    "NotPositiveDefiniteError",
    "NumericalError",
    "PathResult",
    "bic_approx",
    "bic_exact",
    "e_step",
    "encode_censoring",
    "fit_em",
    "fit_path",
    "glasso_fit",
    "observed_loglik",
    "penalized_objective",
    "read_csv",
    "rho_max",
    "select",
    "write_csv",
]
