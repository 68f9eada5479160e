"""Censored quantile instrumental variable estimation.

The estimator handles outcomes recorded only above (or below) a known
censoring point and regressors that are endogenous, using a first-stage
control variable and a three-step sample selection scheme. `run` fits the
model, `run_with_inference` adds bootstrap confidence intervals, and
`simlab` provides a simulation harness for calibration studies. The
command line front end lives in `cqiv.cli` (installed as ``cqiv``).
"""

from . import errors
from .control_stage import ControlFit, FirstStageSpec, TransformSpec, fit_control
from .engine import (
    CqivConfig,
    CqivResult,
    Dataset,
    DiagnosticsRow,
    QuantileFit,
    SelectionState,
    run,
)
from .inference import (
    nonparametric_bootstrap,
    percentile_ci,
    run_with_inference,
    weighted_bootstrap,
)
from .simlab import DgpSpec, TruthTable, generate, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "CqivConfig",
    "CqivResult",
    "ControlFit",
    "Dataset",
    "DgpSpec",
    "DiagnosticsRow",
    "FirstStageSpec",
    "QuantileFit",
    "SelectionState",
    "TransformSpec",
    "TruthTable",
    "errors",
    "fit_control",
    "generate",
    "monte_carlo",
    "nonparametric_bootstrap",
    "percentile_ci",
    "run",
    "run_with_inference",
    "weighted_bootstrap",
    "__version__",
]
