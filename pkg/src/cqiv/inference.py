"""Bootstrap interval estimation for the censored quantile estimators.

Two flavors. The weighted bootstrap keeps every observation and draws
i.i.d. standard exponential weights per repetition; the first stage is
refit under those weights, but the censoring-selection rule is frozen
at the anchor fit, so each repetition costs one control refit plus one
quantile regression per u. The nonparametric bootstrap resamples rows
with replacement and reruns the whole algorithm.

Repetition b always uses its own counter-based random stream derived
from (seed, b), so results do not depend on execution order and
parallel runs reproduce sequential ones bit for bit.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from joblib import Parallel, delayed

from .engine import (
    CqivConfig,
    CqivResult,
    Dataset,
    QuantileFit,
    build_design,
    censor_values,
    corner_effects,
    flip_result,
    orient,
    run,
)
from .errors import (
    CqivError,
    InferenceUnreliableError,
    InsufficientDrawsError,
    InvalidArgumentError,
    SelectionCollapseError,
)
from .numkit import nearest_rank_percentile, solve_wqr

__all__ = [
    "repetition_rng",
    "draw_exponential_weights",
    "weighted_bootstrap",
    "nonparametric_bootstrap",
    "percentile_ci",
    "run_with_inference",
]

# a repetition whose failure share exceeds this is not summarized
_FAILURE_CEILING = 0.2


def repetition_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream for one bootstrap repetition.

    Streams are keyed by (seed, rep) through a counter-based generator,
    so any subset of repetitions can be drawn in any order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(rep),))
    return np.random.Generator(np.random.Philox(ss))


def draw_exponential_weights(rng: np.random.Generator, n: int) -> np.ndarray:
    """n i.i.d. standard exponential weights, strictly positive."""
    u = rng.random(n)
    # u == 0.0 would give a zero weight and silently drop the row
    return -np.log1p(-np.maximum(u, np.finfo(float).tiny))


def _selection_rules(anchor: CqivResult) -> dict[float, tuple]:
    """Freeze the anchor's per-quantile keep rule for reuse on draws.

    The rule that produced the anchor's final estimation sample is
    "pilot fitted value clears the censoring point by more than the
    trim cut"; repetitions reapply it with the pilot coefficients and
    cut taken from the anchor. Quantiles without a selection step keep
    the full sample.
    """
    rules = {}
    for f in anchor.fits:
        if f.selection is not None and f.selection.fitted_cut is not None:
            rules[f.u] = (f.beta2, f.selection.fitted_cut)
        else:
            rules[f.u] = (None, None)
    return rules


def _weighted_draw(dataset: Dataset, config: CqivConfig, rules, rep: int):
    """One weighted repetition: a dict u -> (beta, corner) or u -> message."""
    rng = repetition_rng(config.seed, rep)
    e = draw_exponential_weights(rng, dataset.n)
    wb = e if dataset.weights is None else dataset.weights * e
    try:
        x, _, formula = build_design(dataset, config, weights=wb)
    except CqivError as err:
        return {u: str(err) for u in rules}
    c = censor_values(dataset, config)
    out = {}
    for u, (beta_sel, cut) in rules.items():
        try:
            if cut is None:
                w_u = wb
            else:
                # same float expression as the anchor's trim, so unit
                # weights reproduce the anchor sample exactly
                keep = (x.values @ beta_sel - c) > cut
                if not np.any(keep & (wb > 0)):
                    raise SelectionCollapseError(
                        f"repetition kept no observation at u={u:g}"
                    )
                w_u = np.where(keep, wb, 0.0)
            beta = solve_wqr(x, dataset.y, u, weights=w_u)
            corner = None
            if config.corner:
                shell = QuantileFit(
                    u=u, beta2=beta, beta3=beta, selection=None,
                    diagnostics=None, corner_effect=None, complete=True,
                )
                corner = corner_effects([shell], x, c, formula, weights=wb)[u]
            out[u] = (beta, corner)
        except CqivError as err:
            out[u] = str(err)
    return out


def _resample_draw(dataset: Dataset, config: CqivConfig, rep: int):
    """One row-resampling repetition rerunning the full algorithm."""
    rng = repetition_rng(config.seed, rep)
    idx = rng.integers(0, dataset.n, size=dataset.n)
    try:
        data_b = Dataset(
            y=dataset.y[idx],
            w=dataset.w[idx],
            w_labels=dataset.w_labels,
            d=None if dataset.d is None else dataset.d[idx],
            d_label=dataset.d_label,
            z=None if dataset.z is None else dataset.z[idx],
            z_labels=dataset.z_labels,
            c=None if dataset.c is None else dataset.c[idx],
            y_label=dataset.y_label,
            weights=None if dataset.weights is None else dataset.weights[idx],
        )
        res = run(data_b, config)
    except CqivError as err:
        return {u: str(err) for u in config.quantiles}
    out = {f.u: (f.beta3, f.corner_effect) for f in res.fits}
    for u, message in res.failures:
        out[u] = message
    return out


def _collect(results, quantiles, bootreps):
    """Stack per-repetition outputs; refuse when too many failed."""
    betas = {u: [] for u in quantiles}
    corners = {u: [] for u in quantiles}
    fail_count = {u: 0 for u in quantiles}
    fail_example = {}
    for rep_out in results:
        for u in quantiles:
            got = rep_out[u]
            if isinstance(got, str):
                fail_count[u] += 1
                fail_example.setdefault(u, got)
            else:
                beta, corner = got
                betas[u].append(beta)
                corners[u].append(corner)
    reasons = tuple(
        f"u={u:g}: {fail_count[u]} of {bootreps} repetitions failed "
        f"(first: {fail_example[u]})"
        for u in quantiles
        if fail_count[u] > _FAILURE_CEILING * bootreps
    )
    if reasons:
        raise InferenceUnreliableError(
            "too many bootstrap repetitions failed", reasons=reasons
        )
    beta_draws = {u: np.array(betas[u]) for u in quantiles}
    corner_draws = {
        u: None if not corners[u] or corners[u][0] is None
        else np.array(corners[u], dtype=float)
        for u in quantiles
    }
    return beta_draws, corner_draws


def weighted_bootstrap(
    dataset: Dataset, config: CqivConfig, anchor: CqivResult, n_jobs: int = 1
):
    """Exponential-weight draws around an anchor fit.

    Returns (beta_draws, corner_draws): per successful repetition and
    quantile, the coefficient vector and, when requested, the corner
    marginal effect.
    """
    rules = _selection_rules(anchor)
    if not rules:
        raise InvalidArgumentError("the anchor fit has no successful quantile")
    results = Parallel(n_jobs=n_jobs)(
        delayed(_weighted_draw)(dataset, config, rules, b)
        for b in range(config.bootreps)
    )
    return _collect(results, tuple(rules), config.bootreps)


def nonparametric_bootstrap(
    dataset: Dataset, config: CqivConfig, anchor: CqivResult, n_jobs: int = 1
):
    """Row-resampling draws rerunning the full algorithm each time."""
    us = tuple(f.u for f in anchor.fits)
    if not us:
        raise InvalidArgumentError("the anchor fit has no successful quantile")
    cfg_b = replace(config, confidence="none", quantiles=us)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_resample_draw)(dataset, cfg_b, b)
        for b in range(config.bootreps)
    )
    return _collect(results, us, config.bootreps)


def percentile_ci(draws: np.ndarray, level: float) -> dict[str, np.ndarray]:
    """Columnwise percentile interval plus the draw mean.

    Bounds are nearest-rank order statistics at (100 - level)/2 and
    100 - (100 - level)/2 percent.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    m = draws.shape[0]
    if m < 2:
        raise InsufficientDrawsError(
            f"need at least 2 successful repetitions, got {m}"
        )
    q_lo = (100.0 - float(level)) / 2.0
    q_hi = 100.0 - q_lo
    lower = np.array([nearest_rank_percentile(col, q_lo) for col in draws.T])
    upper = np.array([nearest_rank_percentile(col, q_hi) for col in draws.T])
    return {"lower": lower, "upper": upper, "mean": draws.mean(axis=0)}


def run_with_inference(
    dataset: Dataset, config: CqivConfig, n_jobs: int = 1
) -> CqivResult:
    """Point estimates plus the configured bootstrap intervals.

    With confidence "none" this is just run(). Right censoring is
    oriented once at the top so the repetitions and the anchor share
    the same scale, then everything is sign-mapped back together.
    """
    data_l, cfg_l, flipped = orient(dataset, config)
    anchor = run(data_l, cfg_l)
    if cfg_l.confidence != "none" and anchor.fits:
        if cfg_l.confidence == "weightedboot":
            beta_draws, corner_draws = weighted_bootstrap(
                data_l, cfg_l, anchor, n_jobs=n_jobs
            )
        else:
            beta_draws, corner_draws = nonparametric_bootstrap(
                data_l, cfg_l, anchor, n_jobs=n_jobs
            )
        ci = {}
        draws_used = {}
        for u, arr in beta_draws.items():
            block = percentile_ci(arr, cfg_l.level)
            if corner_draws.get(u) is not None:
                corner_block = percentile_ci(corner_draws[u], cfg_l.level)
                block["corner_lower"] = float(corner_block["lower"][0])
                block["corner_upper"] = float(corner_block["upper"][0])
                block["corner_mean"] = float(corner_block["mean"][0])
            ci[u] = block
            draws_used[u] = int(arr.shape[0])
        anchor.ci = ci
        anchor.ci_draws = draws_used
    return flip_result(anchor, config) if flipped else anchor
