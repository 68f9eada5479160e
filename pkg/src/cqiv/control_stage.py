"""First-stage estimators of the control variable.

Each estimator maps instruments and covariates to a per-observation
rank v_hat in (0, 1): a grid of quantile regressions, a battery of
binary (distribution) regressions over thresholds, or a Gaussian
location model fit by least squares. The second-stage design appends a
transform of v_hat as the control column.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    DegenerateOutcomeError,
    DegenerateScaleError,
    InvalidArgumentError,
)
from .numkit import (
    DesignMatrix,
    LinkFunction,
    binary_mle_fit,
    get_link,
    nearest_rank_percentile,
    ols_fit,
    std_normal_cdf,
    std_normal_quantile,
    wqr_fit,
)

__all__ = [
    "FirstStageSpec",
    "ControlFit",
    "TransformSpec",
    "control_quantile",
    "control_distribution",
    "control_ols",
    "fit_control",
    "build_first_stage_design",
    "build_second_stage_design",
]

_FIRST_STAGE_METHODS = ("quantile", "distribution", "ols")


@dataclass(frozen=True)
class FirstStageSpec:
    """Configuration of the control-variable estimator.

    method : "quantile", "distribution", or "ols"
    n_quant : grid size for the quantile method
    n_thresh : number of bins for the distribution method
    ldv1 : link for the distribution method ("probit" or "logit")
    exclude_exogenous : drop the exogenous covariates from the first
        stage, keeping only the instrument list
    """

    method: str = "quantile"
    n_quant: int = 50
    n_thresh: int = 50
    ldv1: str = "probit"
    exclude_exogenous: bool = False

    def __post_init__(self):
        if self.method not in _FIRST_STAGE_METHODS:
            raise InvalidArgumentError(
                f"unknown first-stage method {self.method!r}; "
                f"expected one of {_FIRST_STAGE_METHODS}"
            )
        if int(self.n_quant) < 1:
            raise InvalidArgumentError("n_quant must be a positive integer")
        if int(self.n_thresh) < 2:
            raise InvalidArgumentError("n_thresh must be at least 2")
        get_link(self.ldv1)
        object.__setattr__(self, "n_quant", int(self.n_quant))
        object.__setattr__(self, "n_thresh", int(self.n_thresh))


@dataclass(frozen=True)
class ControlFit:
    """Fitted control variable with the artifacts that produced it.

    v_hat always lies strictly inside (0, 1). grid holds the quantile
    grid or the distribution thresholds; coef holds the per-grid-point
    coefficient paths (or the single least squares vector); sigma is
    the least squares residual scale.
    """

    v_hat: np.ndarray
    method: str
    grid: np.ndarray | None = None
    coef: np.ndarray | None = None
    sigma: float | None = None
    link_kind: str | None = None

    def __post_init__(self):
        v = np.asarray(self.v_hat, dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v <= 0.0) or np.any(v >= 1.0):
            raise InvalidArgumentError("v_hat must lie strictly inside (0, 1)")
        object.__setattr__(self, "v_hat", v)


def control_quantile(r: DesignMatrix, d, n_quant: int = 50, weights=None) -> ControlFit:
    """Rank each observation through a grid of quantile regressions.

    Fits one quantile regression of d on r per grid point
    v_j = j / (n_quant + 1) and counts how many fitted quantiles sit at
    or below the observed d. The count over the grid size, clamped one
    grid step away from 0 and 1, is the control.
    """
    d = np.asarray(d, dtype=float)
    n_quant = int(n_quant)
    if n_quant < 1:
        raise InvalidArgumentError("n_quant must be a positive integer")
    grid = np.arange(1, n_quant + 1) / (n_quant + 1.0)
    coef = np.empty((n_quant, r.p))
    for j, v in enumerate(grid):
        coef[j] = wqr_fit(r, d, float(v), weights=weights).beta
    fitted = r.values @ coef.T
    count = np.sum(fitted <= d[:, None], axis=1)
    tau = 1.0 / (n_quant + 1.0)
    v_hat = np.clip(count / n_quant, tau, 1.0 - tau)
    return ControlFit(v_hat=v_hat, method="quantile", grid=grid, coef=coef)


def control_distribution(
    r: DesignMatrix,
    d,
    n_thresh: int = 50,
    link: LinkFunction | str = "probit",
    weights=None,
) -> ControlFit:
    """Rank each observation through binary fits at sample thresholds.

    Thresholds sit at the j/n_thresh nearest-rank sample quantiles of d
    for j = 1 .. n_thresh - 1 (duplicates collapse). An observation in
    bin j, meaning d is at or below threshold j but above threshold
    j - 1, gets the fitted probability of the bin's upper threshold;
    the top bin maps to the clamp ceiling 1 - 1/(2 n_thresh).
    """
    if isinstance(link, str):
        link = get_link(link)
    d = np.asarray(d, dtype=float)
    n_thresh = int(n_thresh)
    if n_thresh < 2:
        raise InvalidArgumentError("n_thresh must be at least 2")
    raw = [
        nearest_rank_percentile(d, float(Fraction(100, n_thresh) * j))
        for j in range(1, n_thresh)
    ]
    thresholds = np.unique(np.asarray(raw, dtype=float))
    coef = np.empty((len(thresholds), r.p))
    for j, thr in enumerate(thresholds):
        outcome = (d <= thr).astype(float)
        try:
            coef[j] = binary_mle_fit(r, outcome, link, weights=weights).delta
        except DegenerateOutcomeError as err:
            raise DegenerateOutcomeError(
                f"threshold {j + 1} of {len(thresholds)} (value {thr:g}) "
                f"leaves a one-class outcome: {err}"
            ) from err
    tau = 1.0 / (2.0 * n_thresh)
    bins = np.searchsorted(thresholds, d, side="left")
    interior = bins < len(thresholds)
    v_hat = np.full(d.shape, 1.0 - tau)
    if np.any(interior):
        eta = np.sum(
            r.values[interior] * coef[bins[interior]], axis=1
        )
        v_hat[interior] = np.clip(link.cdf(eta), tau, 1.0 - tau)
    return ControlFit(
        v_hat=v_hat,
        method="distribution",
        grid=thresholds,
        coef=coef,
        link_kind=link.kind,
    )


def control_ols(r: DesignMatrix, d, weights=None) -> ControlFit:
    """Rank each observation through a Gaussian location model.

    Least squares of d on r; the control is the standard normal cdf of
    the standardized residual, clamped to [1e-6, 1 - 1e-6].
    """
    d = np.asarray(d, dtype=float)
    fit = ols_fit(r, d, weights=weights)
    # exact zero cannot survive float round-off, so degeneracy is a
    # scale collapse relative to the magnitude of d
    if fit.sigma <= 1e-10 * max(1.0, float(np.sqrt(np.mean(d * d)))):
        raise DegenerateScaleError(
            "first-stage residual scale vanished; d is collinear with the "
            "first-stage design"
        )
    resid = (d - r.values @ fit.pi) / fit.sigma
    v_hat = np.clip(std_normal_cdf(resid), 1e-6, 1.0 - 1e-6)
    return ControlFit(
        v_hat=v_hat, method="ols", coef=fit.pi[None, :], sigma=fit.sigma
    )


def fit_control(r: DesignMatrix, d, spec: FirstStageSpec, weights=None) -> ControlFit:
    """Dispatch to the configured first-stage estimator."""
    if spec.method == "quantile":
        return control_quantile(r, d, spec.n_quant, weights=weights)
    if spec.method == "distribution":
        return control_distribution(
            r, d, spec.n_thresh, link=spec.ldv1, weights=weights
        )
    return control_ols(r, d, weights=weights)


# --------------------------------------------------------------------------
# design construction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransformSpec:
    """Shape of the second-stage regression function.

    endog : label of the endogenous regressor, or None when the model
        has no endogenous variable
    exog : labels of the exogenous regressors to include, in order
    intercept : append a constant column labeled "const"
    control_transform : "normal" enters the standard normal quantile of
        v_hat; "raw" enters v_hat itself
    endog_derived : labels of exogenous columns declared to be
        functions of the endogenous regressor (powers, interactions);
        marginal-effect computations refuse when this is nonempty
    """

    endog: str | None
    exog: tuple[str, ...] = ()
    intercept: bool = True
    control_transform: str = "normal"
    endog_derived: tuple[str, ...] = ()

    def __post_init__(self):
        if self.control_transform not in ("normal", "raw"):
            raise InvalidArgumentError(
                "control_transform must be 'normal' or 'raw'"
            )
        object.__setattr__(self, "exog", tuple(self.exog))
        object.__setattr__(self, "endog_derived", tuple(self.endog_derived))


def build_first_stage_design(
    w: np.ndarray,
    w_labels: tuple[str, ...],
    z: np.ndarray,
    z_labels: tuple[str, ...],
    exclude_exogenous: bool = False,
) -> DesignMatrix:
    """Assemble the first-stage regressors [covariates | instruments | const].

    A label appearing in both lists enters once (covariate position).
    With exclude_exogenous the covariates are dropped and only the
    instrument list plus the constant remains.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if w.shape[0] == 1 and len(w_labels) != 1:
        w = w.T
    if z.shape[0] == 1 and len(z_labels) != 1:
        z = z.T
    n = z.shape[0] if z.size else w.shape[0]
    cols, labels = [], []
    if not exclude_exogenous:
        for j, lab in enumerate(w_labels):
            cols.append(w[:, j])
            labels.append(lab)
    for j, lab in enumerate(z_labels):
        if lab in labels:
            continue
        cols.append(z[:, j])
        labels.append(lab)
    cols.append(np.ones(n))
    labels.append("const")
    return DesignMatrix(np.column_stack(cols), tuple(labels))


def build_second_stage_design(
    d: np.ndarray | None,
    w: np.ndarray,
    w_labels: tuple[str, ...],
    fit: ControlFit | None,
    formula: TransformSpec,
) -> DesignMatrix:
    """Assemble the outcome-equation regressors.

    Column order is endogenous regressor, exogenous regressors in
    formula order, constant, control. The control column carries the
    label "control". fit=None omits the control column.
    """
    cols, labels = [], []
    if formula.endog is not None:
        if d is None:
            raise InvalidArgumentError(
                f"formula names endogenous column {formula.endog!r} but no "
                "endogenous data was given"
            )
        cols.append(np.asarray(d, dtype=float))
        labels.append(formula.endog)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape[0] == 1 and len(w_labels) != 1:
        w = w.T
    index = {lab: j for j, lab in enumerate(w_labels)}
    for lab in formula.exog:
        if lab not in index:
            raise InvalidArgumentError(f"formula names unknown column {lab!r}")
        cols.append(w[:, index[lab]])
        labels.append(lab)
    n = len(cols[0]) if cols else len(fit.v_hat)
    if formula.intercept:
        cols.append(np.ones(n))
        labels.append("const")
    if fit is not None:
        if formula.control_transform == "normal":
            cols.append(std_normal_quantile(fit.v_hat))
        else:
            cols.append(fit.v_hat.copy())
        labels.append("control")
    return DesignMatrix(np.column_stack(cols), tuple(labels))
