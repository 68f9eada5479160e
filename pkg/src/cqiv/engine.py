"""Censored quantile estimation with an estimated control variable.

The estimator runs in up to four stages: fit the control variable from
instruments (step 0), predict which observations have their conditional
quantile above the censoring point (step 1), fit a pilot quantile
regression on that subsample and trim observations whose fitted value
sits too close to the censoring point (step 2), and refit on the
trimmed sample (step 3). Right censoring is handled by negating the
data, running the left-censored path, and mapping signs back.

Variants: "cqiv" runs everything; "qiv" keeps the control but skips the
selection steps (no censoring correction); "cqr" drops the control and
instruments but keeps the censoring correction.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .control_stage import (
    ControlFit,
    FirstStageSpec,
    TransformSpec,
    build_first_stage_design,
    build_second_stage_design,
    fit_control,
)
from .errors import (
    CqivError,
    InvalidArgumentError,
    NoQuantileUncensoredError,
    SelectionCollapseError,
    UnsupportedFormulaError,
)
from .numkit import (
    DesignMatrix,
    LinkFunction,
    as_weight_vector,
    binary_mle_fit,
    get_link,
    nearest_rank_percentile,
    solve_wqr,
    wqr_fit,
)

__all__ = [
    "Dataset",
    "CqivConfig",
    "SelectionState",
    "QuantileFit",
    "DiagnosticsRow",
    "CqivResult",
    "orient",
    "flip_result",
    "build_design",
    "censor_values",
    "select_step1",
    "fit_step2",
    "fit_step3",
    "corner_effects",
    "diagnostics",
    "run",
]

logger = logging.getLogger("cqiv")

_VARIANTS = ("cqiv", "qiv", "cqr")
_SIDES = ("left", "right")
_CONFIDENCE = ("none", "boot", "weightedboot")


# --------------------------------------------------------------------------
# data and configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Aligned estimation columns for n observations.

    y is the (possibly censored) outcome; d the endogenous regressor
    (None when the model has none); w the exogenous regressors as an
    (n, kw) matrix; z the instruments as an (n, kz) matrix; c the
    per-observation censoring points (None defers to the configured
    scalar censor point); weights optional nonnegative observation
    weights.
    """

    y: np.ndarray
    w: np.ndarray
    w_labels: tuple[str, ...]
    d: np.ndarray | None = None
    d_label: str = "d"
    z: np.ndarray | None = None
    z_labels: tuple[str, ...] = ()
    c: np.ndarray | None = None
    y_label: str = "y"
    weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1 or y.size == 0:
            raise InvalidArgumentError("y must be a nonempty 1-d array")
        n = y.size
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if w.size == 0:
            w = w.reshape(n, 0)
        arrays = {"y": y, "w": w}
        d = self.d
        if d is not None:
            d = np.asarray(d, dtype=float)
            arrays["d"] = d
        z = self.z
        if z is not None:
            z = np.asarray(z, dtype=float)
            if z.ndim == 1:
                z = z[:, None]
            if z.size == 0:
                z = z.reshape(n, 0)
            arrays["z"] = z
        c = self.c
        if c is not None:
            c = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
            arrays["c"] = c
        for name, arr in arrays.items():
            if arr.shape[0] != n:
                raise InvalidArgumentError(
                    f"column {name} has {arr.shape[0]} rows, expected {n}"
                )
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"column {name} contains non-finite values")
        w_labels = tuple(str(s) for s in self.w_labels)
        if len(w_labels) != w.shape[1]:
            raise InvalidArgumentError(
                f"got {len(w_labels)} labels for {w.shape[1]} exogenous columns"
            )
        z_labels = tuple(str(s) for s in self.z_labels)
        if z is not None and len(z_labels) != z.shape[1]:
            raise InvalidArgumentError(
                f"got {len(z_labels)} labels for {z.shape[1]} instrument columns"
            )
        if self.weights is not None:
            as_weight_vector(self.weights, n)
            object.__setattr__(
                self, "weights", np.asarray(self.weights, dtype=float)
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "w_labels", w_labels)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_labels", z_labels)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class CqivConfig:
    """Estimator configuration.

    quantiles are fractions in (0, 1). q0 and q1 are the step-1 and
    step-2 trimming percents. censor_point is the scalar censoring
    value used when the dataset carries no per-observation censoring
    column. confidence picks the bootstrap flavor; level is the
    interval coverage percent.
    """

    quantiles: tuple[float, ...] = (0.5,)
    variant: str = "cqiv"
    censor_point: float = 0.0
    censor_side: str = "left"
    first_stage: FirstStageSpec = field(default_factory=FirstStageSpec)
    ldv2: str = "probit"
    q0: float = 10.0
    q1: float = 3.0
    corner: bool = False
    confidence: str = "none"
    bootreps: int = 100
    seed: int = 777
    level: float = 95.0
    norobust: bool = False
    control_transform: str = "normal"
    endog_derived: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise InvalidArgumentError(
                f"unknown variant {self.variant!r}; expected one of {_VARIANTS}"
            )
        if self.censor_side not in _SIDES:
            raise InvalidArgumentError("censor_side must be 'left' or 'right'")
        if self.confidence not in _CONFIDENCE:
            raise InvalidArgumentError(
                f"confidence must be one of {_CONFIDENCE}"
            )
        get_link(self.ldv2)
        if not isinstance(self.first_stage, FirstStageSpec):
            raise InvalidArgumentError("first_stage must be a FirstStageSpec")
        quantiles = tuple(float(u) for u in self.quantiles)
        if not quantiles:
            raise InvalidArgumentError("at least one quantile is required")
        for u in quantiles:
            if not (0.0 < u < 1.0):
                raise InvalidArgumentError(
                    f"quantiles must lie strictly in (0, 1), got {u}"
                )
        ordered = tuple(sorted(set(quantiles)))
        if len(ordered) != len(quantiles):
            warnings.warn("duplicate quantiles dropped", stacklevel=2)
        object.__setattr__(self, "quantiles", ordered)
        for name in ("q0", "q1"):
            val = float(getattr(self, name))
            if not (0.0 <= val < 100.0):
                raise InvalidArgumentError(
                    f"{name} must lie in [0, 100), got {val}"
                )
            object.__setattr__(self, name, val)
        if not (0.0 < float(self.level) < 100.0):
            raise InvalidArgumentError("level must lie strictly in (0, 100)")
        if int(self.bootreps) < 1:
            raise InvalidArgumentError("bootreps must be a positive integer")
        object.__setattr__(self, "bootreps", int(self.bootreps))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "level", float(self.level))
        object.__setattr__(self, "censor_point", float(self.censor_point))
        object.__setattr__(self, "endog_derived", tuple(self.endog_derived))
        if self.control_transform not in ("normal", "raw"):
            raise InvalidArgumentError("control_transform must be 'normal' or 'raw'")


# --------------------------------------------------------------------------
# per-quantile artifacts
# --------------------------------------------------------------------------


@dataclass
class SelectionState:
    """Artifacts of the sample-selection steps at one quantile.

    delta: censoring-model coefficients. prob_uncensored: fitted
    probability that the observation is uncensored. keep1: mask after
    the probability-scale cut (prob_cut above 1 - u, index_cut is the
    same cut in the linear-index space, where the selection is
    evaluated). keep2 and fitted_cut arrive after step 2: fitted_cut is
    the trim on fitted-value-minus-censor-point.
    """

    delta: np.ndarray
    prob_uncensored: np.ndarray
    prob_cut: float
    index_cut: float
    keep1: np.ndarray
    s_labels: tuple[str, ...]
    fitted_cut: float | None = None
    keep2: np.ndarray | None = None


@dataclass
class QuantileFit:
    """Point estimates at one quantile."""

    u: float
    beta2: np.ndarray
    beta3: np.ndarray
    selection: SelectionState | None
    diagnostics: DiagnosticsRow | None
    corner_effect: float | None
    complete: bool


@dataclass(frozen=True)
class DiagnosticsRow:
    """Share of the sample surviving each selection step, in percent.

    pct_step1_lost is the share of the step-1 sample that step 2
    dropped. complete records whether every algorithm step actually
    ran. Ratios are exact count ratios.
    """

    u: float
    pct_kept_step1: float
    pct_kept_step2: float
    pct_step1_lost: float
    complete: bool


@dataclass
class CqivResult:
    """Full estimation output across quantiles."""

    config: CqivConfig
    n: int
    labels: tuple[str, ...]
    names: dict[str, object]
    fits: list[QuantileFit]
    failures: list[tuple[float, str]]
    control: ControlFit | None
    censoring_active: bool
    ci: dict[float, dict[str, np.ndarray]] | None = None
    ci_draws: dict[float, int] | None = None


# --------------------------------------------------------------------------
# orientation
# --------------------------------------------------------------------------


def orient(dataset: Dataset, config: CqivConfig) -> tuple[Dataset, CqivConfig, bool]:
    """Map a right-censored problem onto the left-censored path.

    Negates the outcome and the censoring values and flips the side
    flag; a left-censored input comes back unchanged. Applying the map
    twice returns the original problem.
    """
    if config.censor_side == "left":
        return dataset, config, False
    flipped = replace(
        dataset,
        y=-dataset.y,
        c=None if dataset.c is None else -dataset.c,
    )
    return (
        flipped,
        replace(config, censor_side="left", censor_point=-config.censor_point),
        True,
    )


def flip_result(result: CqivResult, original_config: CqivConfig) -> CqivResult:
    """Sign-map a left-censored run back to the right-censored scale.

    Coefficients, marginal effects, and interval bounds negate (bounds
    swap roles); diagnostics, selection artifacts, and the control fit
    stay on the estimation scale.
    """
    fits = [
        replace(
            f,
            beta2=-f.beta2,
            beta3=-f.beta3,
            corner_effect=None if f.corner_effect is None else -f.corner_effect,
        )
        for f in result.fits
    ]
    ci = None
    if result.ci is not None:
        ci = {u: _flip_block(block) for u, block in result.ci.items()}
    return replace(result, config=original_config, fits=fits, ci=ci)


def _flip_block(block: dict) -> dict:
    out = {
        "lower": -block["upper"],
        "upper": -block["lower"],
        "mean": -block["mean"],
    }
    if "corner_lower" in block:
        out["corner_lower"] = -block["corner_upper"]
        out["corner_upper"] = -block["corner_lower"]
        out["corner_mean"] = -block["corner_mean"]
    return out


# --------------------------------------------------------------------------
# selection steps
# --------------------------------------------------------------------------


def select_step1(
    s: DesignMatrix,
    uncensored: np.ndarray,
    u: float,
    q0: float,
    link: LinkFunction,
    weights=None,
) -> SelectionState:
    """Predict the quantile-uncensored sample at quantile u.

    Fits the binary censoring model, keeps observations whose fitted
    probability of being uncensored exceeds 1 - u, and drops the bottom
    q0 percent of those. The cut is carried in the linear-index space,
    where the probability-scale and index-scale selection rules agree
    observation by observation.
    """
    w = as_weight_vector(weights, s.n)
    fit = binary_mle_fit(s, uncensored, link, weights=weights)
    eta = s.values @ fit.delta
    floor = float(link.quantile(1.0 - u))
    candidates = (eta > floor) & (w > 0)
    if not np.any(candidates):
        raise NoQuantileUncensoredError(
            f"no observation is predicted quantile-uncensored at u={u:g}",
            u=u,
        )
    if q0 <= 0.0:
        cut = floor
        prob_cut = 0.0
    else:
        cut = nearest_rank_percentile(eta[candidates], q0)
        prob_cut = _exact_excess(float(link.cdf(cut)), 1.0 - u)
    keep1 = eta > cut
    if not np.any(keep1 & (w > 0)):
        raise SelectionCollapseError(
            f"the step-1 probability cut removed every candidate at u={u:g}"
        )
    logger.info(
        "u=%g step1: model converged in %d iterations; %d candidates, "
        "probability excess %g, kept %d",
        u, fit.iterations, int(candidates.sum()), prob_cut, int(keep1.sum()),
    )
    return SelectionState(
        delta=fit.delta,
        prob_uncensored=link.cdf(eta),
        prob_cut=prob_cut,
        index_cut=float(cut),
        keep1=keep1,
        s_labels=s.labels,
    )


def _exact_excess(target: float, base: float) -> float:
    """The float k with base + k == target exactly.

    The naive target - base need not round-trip through the addition;
    that would shift the probability-scale cut off the index-scale cut
    by an ulp and misclassify the observation sitting on the cut.
    """
    k = target - base
    while base + k < target:
        k = math.nextafter(k, math.inf)
    while base + k > target:
        k = math.nextafter(k, -math.inf)
    return k


def fit_step2(
    x: DesignMatrix,
    y: np.ndarray,
    u: float,
    state: SelectionState,
    q1: float,
    c: np.ndarray,
    weights=None,
) -> tuple[np.ndarray, SelectionState]:
    """Pilot quantile regression and the fitted-value trim.

    Fits on the step-1 sample, then keeps every observation in the full
    sample whose fitted value clears its censoring point by more than
    the q1-th percentile of the positive clearances.
    """
    w = as_weight_vector(weights, x.n)
    w1 = np.where(state.keep1, w, 0.0)
    pilot = wqr_fit(x, y, u, weights=w1)
    beta2 = pilot.beta
    clearance = x.values @ beta2 - c
    positive = (clearance > 0.0) & (w > 0)
    if not np.any(positive):
        raise SelectionCollapseError(
            f"no fitted value clears the censoring point at u={u:g}"
        )
    cut = 0.0 if q1 <= 0.0 else nearest_rank_percentile(clearance[positive], q1)
    keep2 = clearance > cut
    if not np.any(keep2 & (w > 0)):
        raise SelectionCollapseError(
            f"the step-2 trim removed every observation at u={u:g}"
        )
    state.fitted_cut = float(cut)
    state.keep2 = keep2
    if not _subset(state.keep1, keep2):
        logger.warning(
            "u=%g: step-1 sample is not contained in the step-2 sample", u
        )
    logger.info(
        "u=%g step2: pilot solved in %d iterations; trim=%g, kept %d of %d",
        u, pilot.iterations, cut, int(keep2.sum()), x.n,
    )
    return beta2, state


def fit_step3(
    x: DesignMatrix,
    y: np.ndarray,
    u: float,
    state: SelectionState,
    weights=None,
) -> np.ndarray:
    """Final quantile regression on the trimmed sample."""
    if state.keep2 is None:
        raise InvalidArgumentError("step 2 has not run for this selection state")
    w = as_weight_vector(weights, x.n)
    fit = wqr_fit(x, y, u, weights=np.where(state.keep2, w, 0.0))
    logger.info("u=%g step3: solved in %d iterations", u, fit.iterations)
    return fit.beta


def _subset(inner: np.ndarray, outer: np.ndarray) -> bool:
    return bool(np.all(outer[inner]))


def diagnostics(state: SelectionState | None, u: float, n: int,
                complete: bool) -> DiagnosticsRow:
    """Selection shares as exact count ratios, in percent."""
    if state is None or state.keep2 is None:
        return DiagnosticsRow(u, 100.0, 100.0, 0.0, complete)
    n1 = int(np.sum(state.keep1))
    n2 = int(np.sum(state.keep2))
    lost = int(np.sum(state.keep1 & ~state.keep2))
    return DiagnosticsRow(
        u=u,
        pct_kept_step1=100.0 * n1 / n,
        pct_kept_step2=100.0 * n2 / n,
        pct_step1_lost=0.0 if n1 == 0 else 100.0 * lost / n1,
        complete=complete,
    )


# --------------------------------------------------------------------------
# corner marginal effects
# --------------------------------------------------------------------------


def corner_effects(
    fits: list[QuantileFit],
    x: DesignMatrix,
    c: np.ndarray,
    formula: TransformSpec,
    weights=None,
) -> dict[float, float]:
    """Average marginal effect of the endogenous regressor on the
    observed (censored) outcome, per quantile.

    Only defined when the regression function is linear in the
    endogenous regressor: the effect is its coefficient times the share
    of observations whose fitted value exceeds the censoring point.
    """
    if formula.endog is None:
        raise UnsupportedFormulaError(
            "marginal effects need an endogenous regressor in the formula"
        )
    if formula.endog_derived:
        raise UnsupportedFormulaError(
            "the formula is nonlinear in the endogenous regressor "
            f"(derived columns: {', '.join(formula.endog_derived)}); "
            "compute marginal effects directly from the coefficients instead"
        )
    w = as_weight_vector(weights, x.n)
    w = w / w.sum()
    j = x.labels.index(formula.endog)
    out = {}
    for f in fits:
        above = (x.values @ f.beta3) > c
        out[f.u] = float(w @ above) * float(f.beta3[j])
    return out


# --------------------------------------------------------------------------
# the full algorithm
# --------------------------------------------------------------------------


def run(dataset: Dataset, config: CqivConfig) -> CqivResult:
    """Estimate all configured quantiles; per-quantile failures are
    recorded, not raised.

    Returns point estimates only; interval estimation composes on top.
    When no observation is censored the selection steps are vacuous and
    every quantile reduces to one quantile regression on the full
    sample (flagged incomplete in the diagnostics).
    """
    dataset_left, config_left, flipped = orient(dataset, config)
    if flipped:
        return flip_result(run(dataset_left, config_left), config)

    _validate_pair(dataset, config)
    n = dataset.n
    c = censor_values(dataset, config)
    w_base = dataset.weights
    w_vec = as_weight_vector(w_base, n)
    x, control, formula = build_design(dataset, config, weights=w_base)

    uncensored = (dataset.y > c).astype(float)
    active = bool(np.any(uncensored[w_vec > 0] == 0.0))
    varying_c = bool(np.any(c != c[0]))
    if varying_c:
        s = DesignMatrix(
            np.column_stack([x.values, c]), x.labels + ("censor",)
        )
    else:
        s = x
    link2 = get_link(config.ldv2)

    fits: list[QuantileFit] = []
    failures: list[tuple[float, str]] = []
    for u in config.quantiles:
        try:
            fits.append(
                _fit_one(
                    dataset, config, u, x, s, c, uncensored, active, w_base
                )
            )
        except CqivError as err:
            logger.warning("u=%g failed: %s", u, err)
            failures.append((u, str(err)))

    if config.corner and fits:
        effects = corner_effects(fits, x, c, formula, weights=w_base)
        for f in fits:
            f.corner_effect = effects[f.u]

    return CqivResult(
        config=config,
        n=n,
        labels=x.labels,
        names={
            "depvar": dataset.y_label,
            "endogvar": dataset.d_label if dataset.d is not None else "",
            "instruments": tuple(dataset.z_labels),
        },
        fits=fits,
        failures=failures,
        control=control,
        censoring_active=active,
    )


def _fit_one(dataset, config, u, x, s, c, uncensored, active, w_base):
    selection_wanted = config.variant in ("cqiv", "cqr")
    if selection_wanted and active:
        state = select_step1(s, uncensored, u, config.q0, get_link(config.ldv2),
                             weights=w_base)
        beta2, state = fit_step2(x, dataset.y, u, state, config.q1, c,
                                 weights=w_base)
        beta3 = fit_step3(x, dataset.y, u, state, weights=w_base)
        return QuantileFit(
            u=u,
            beta2=beta2,
            beta3=beta3,
            selection=state,
            diagnostics=diagnostics(state, u, dataset.n, complete=True),
            corner_effect=None,
            complete=True,
        )
    # no censored observation (or the variant skips selection): a single
    # quantile regression on the full sample
    beta = solve_wqr(x, dataset.y, u, weights=w_base)
    diag = (
        diagnostics(None, u, dataset.n, complete=False)
        if selection_wanted
        else None
    )
    return QuantileFit(
        u=u,
        beta2=beta,
        beta3=beta,
        selection=None,
        diagnostics=diag,
        corner_effect=None,
        complete=not selection_wanted,
    )


def build_design(
    dataset: Dataset, config: CqivConfig, weights=None
) -> tuple[DesignMatrix, ControlFit | None, TransformSpec]:
    """First stage plus second-stage design under the given weights.

    The bootstrap rebuilds the design per repetition with reweighted
    first stages, so this must be the single code path the point
    estimator also uses.
    """
    control = None
    if config.variant in ("cqiv", "qiv"):
        r = build_first_stage_design(
            dataset.w,
            dataset.w_labels,
            dataset.z,
            dataset.z_labels,
            config.first_stage.exclude_exogenous,
        )
        logger.info("first stage (%s) on %s", config.first_stage.method, r.labels)
        control = fit_control(r, dataset.d, config.first_stage, weights=weights)
    formula = TransformSpec(
        endog=dataset.d_label if dataset.d is not None else None,
        exog=dataset.w_labels,
        intercept=True,
        control_transform=config.control_transform,
        endog_derived=config.endog_derived,
    )
    x = build_second_stage_design(
        dataset.d, dataset.w, dataset.w_labels, control, formula
    )
    return x, control, formula


def censor_values(dataset: Dataset, config: CqivConfig) -> np.ndarray:
    """Per-observation censoring points; the dataset column wins over
    the configured scalar."""
    if dataset.c is not None:
        return dataset.c
    return np.full(dataset.n, config.censor_point)


def _validate_pair(dataset: Dataset, config: CqivConfig) -> None:
    if config.variant in ("cqiv", "qiv"):
        if dataset.d is None:
            raise InvalidArgumentError(
                f"variant {config.variant!r} needs an endogenous column"
            )
        if dataset.z is None or dataset.z.shape[1] == 0:
            raise InvalidArgumentError(
                f"variant {config.variant!r} needs at least one instrument"
            )
    if config.corner:
        if config.variant == "qiv":
            raise InvalidArgumentError(
                "corner marginal effects require a censored variant"
            )
        if dataset.d is None:
            raise InvalidArgumentError(
                "corner marginal effects need an endogenous regressor"
            )
