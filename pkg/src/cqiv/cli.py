"""Command line front end.

Model syntax mirrors the two-list convention: a dependent variable,
optional exogenous regressors, and a parenthesized group naming the
endogenous regressor and its instruments, e.g.

    cqiv data.csv alcohol nkids (logexp = logwages) --quantiles 25 50 75

Percents on the command line (quantiles, trims, level) are converted
to the library's fractions exactly once, here. Results go to stdout as
a table and to a JSON document whose top-level field names follow the
Stata command's saved-results names.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .control_stage import FirstStageSpec
from .engine import CqivConfig, CqivResult, Dataset
from .errors import CqivError, DataError, InvalidArgumentError, UsageError
from .inference import run_with_inference
from .simlab import DgpSpec, monte_carlo

__all__ = [
    "CliInvocation",
    "parse_invocation",
    "load_csv",
    "expand_numlist",
    "build_result_document",
    "render_table",
    "write_document",
    "main",
]

logger = logging.getLogger("cqiv")

_RANGE = re.compile(r"^([^()]+)\(([^()]+)\)([^()]+)$")

_TITLES = {
    "cqiv": "censored quantile instrumental variable regression",
    "qiv": "quantile instrumental variable regression (uncensored)",
    "cqr": "censored quantile regression (exogenous)",
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems instead of exiting the process."""

    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class CliInvocation:
    """A fully parsed command line."""

    data_path: str
    depvar: str
    exog: tuple[str, ...]
    endog: str | None
    instruments: tuple[str, ...]
    config: CqivConfig
    out: str
    viewlog: bool
    filters: tuple[tuple[str, float, float], ...]
    weight_column: str | None


# -------------------------------------------------------------------
# parsing
# -------------------------------------------------------------------


def expand_numlist(tokens) -> list[float]:
    """Numbers plus start(step)stop ranges, e.g. 20 25 70(5)90."""
    out = []
    for token in tokens:
        match = _RANGE.match(token)
        if match:
            try:
                start, step, stop = (float(g) for g in match.groups())
            except ValueError:
                raise UsageError(f"cannot parse numlist token {token!r}")
            if step <= 0.0 or stop < start:
                raise UsageError(
                    f"range {token!r} needs a positive step and stop >= start"
                )
            k = 0
            while True:
                value = start + k * step
                if value > stop + 1e-9:
                    break
                out.append(round(value, 10))
                k += 1
        else:
            try:
                out.append(round(float(token), 10))
            except ValueError:
                raise UsageError(f"cannot parse numlist token {token!r}")
    return out


def _quantile_fractions(tokens) -> tuple[float, ...]:
    percents = expand_numlist(tokens)
    for pct in percents:
        if not (0.0 < pct < 100.0):
            raise UsageError(
                f"quantiles are percents strictly between 0 and 100, got {pct:g}"
            )
    return tuple(pct / 100.0 for pct in percents)


def _build_estimation_parser() -> _Parser:
    p = _Parser(
        prog="cqiv",
        description="Censored quantile regression with endogenous regressors.",
        allow_abbrev=False,
    )
    p.add_argument("data", help="CSV file with a header row")
    p.add_argument(
        "model",
        nargs="+",
        help="depvar [exog ...] (endog = instruments ...); the parenthesized "
        "group is omitted with --exogenous",
    )
    p.add_argument("--quantiles", nargs="+", default=["50"], metavar="PCT",
                   help="percents; ranges like 70(5)90 expand")
    p.add_argument("--censorpt", type=float, default=0.0,
                   help="censoring point (default 0)")
    p.add_argument("--top", action="store_true",
                   help="censoring from above instead of below")
    p.add_argument("--uncensored", action="store_true",
                   help="skip the censoring correction")
    p.add_argument("--exogenous", action="store_true",
                   help="no endogenous regressor; all regressors exogenous")
    p.add_argument("--firststage",
                   choices=["quantile", "distribution", "ols"],
                   default="quantile")
    p.add_argument("--exclude", action="store_true",
                   help="exclude exogenous regressors from the first stage")
    p.add_argument("--nquant", type=int, default=50,
                   help="first-stage quantile grid size")
    p.add_argument("--nthresh", type=int, default=50,
                   help="first-stage distribution threshold count")
    p.add_argument("--ldv1", choices=["probit", "logit"], default="probit",
                   help="link for the distribution first stage")
    p.add_argument("--ldv2", choices=["probit", "logit"], default="probit",
                   help="link for the censoring model")
    p.add_argument("--corner", action="store_true",
                   help="report corner marginal effects for the endogenous "
                   "regressor")
    p.add_argument("--drop1", type=float, default=10.0,
                   help="step-1 trim percent")
    p.add_argument("--drop2", type=float, default=3.0,
                   help="step-2 trim percent")
    p.add_argument("--viewlog", action="store_true",
                   help="stream per-step details to stderr")
    p.add_argument("--confidence", choices=["no", "boot", "weightedboot"],
                   default="no")
    p.add_argument("--bootreps", type=int, default=100)
    p.add_argument("--setseed", type=int, default=777)
    p.add_argument("--level", type=float, default=95.0)
    p.add_argument("--norobust", action="store_true",
                   help="suppress the diagnostics table")
    p.add_argument("--out", default="cqiv_results.json",
                   help="result document path")
    p.add_argument("--filter", action="append", default=[],
                   metavar="COL:LO:HI", help="keep rows with LO <= COL <= HI")
    p.add_argument("--weight", default=None, metavar="COL",
                   help="observation weight column")
    return p


def _parse_model(tokens, exogenous: bool):
    text = " ".join(tokens)
    has_group = "(" in text or ")" in text
    if exogenous and has_group:
        raise UsageError(
            "--exogenous cannot be combined with an (endog = instruments) group"
        )
    if not exogenous and not has_group:
        raise UsageError(
            "missing (endog = instruments) group; use --exogenous for a model "
            "without instruments"
        )
    if not has_group:
        return tuple(text.split()), None, ()
    if text.count("(") != 1 or text.count(")") != 1 or text.index(
            "(") > text.index(")"):
        raise UsageError("expected exactly one (endog = instruments) group")
    before, rest = text.split("(", 1)
    inside, after = rest.split(")", 1)
    if "=" not in inside:
        raise UsageError("the parenthesized group must be endog = instruments")
    lhs, rhs = inside.split("=", 1)
    endog_names = lhs.split()
    instruments = tuple(rhs.split())
    if len(endog_names) != 1:
        raise UsageError("exactly one endogenous regressor is supported")
    if not instruments:
        raise UsageError("at least one instrument is required")
    exog = tuple(before.split() + after.split())
    return exog, endog_names[0], instruments


def _parse_filters(raws) -> tuple[tuple[str, float, float], ...]:
    out = []
    for raw in raws:
        parts = raw.split(":")
        if len(parts) != 3 or not parts[0]:
            raise UsageError(f"--filter wants COL:LO:HI, got {raw!r}")
        try:
            lo, hi = float(parts[1]), float(parts[2])
        except ValueError:
            raise UsageError(f"--filter bounds must be numbers, got {raw!r}")
        if lo > hi:
            raise UsageError(f"--filter range is empty: {raw!r}")
        out.append((parts[0], lo, hi))
    return tuple(out)


def parse_invocation(argv) -> CliInvocation:
    """Turn argv into a validated invocation; percent options become
    fractions here and nowhere else."""
    ns = _build_estimation_parser().parse_args(list(argv))
    if ns.uncensored and ns.exogenous:
        raise UsageError("--uncensored cannot be combined with --exogenous")
    if ns.corner and ns.uncensored:
        raise UsageError("--corner cannot be combined with --uncensored")
    if ns.corner and ns.exogenous:
        raise UsageError("--corner cannot be combined with --exogenous")

    depvar, *model = ns.model
    exog, endog, instruments = _parse_model(model, ns.exogenous)
    if len(set(exog)) != len(exog):
        raise UsageError("duplicate exogenous regressor names")
    if endog is not None and endog in exog:
        raise UsageError(f"{endog!r} appears as both endogenous and exogenous")
    if endog is not None and endog in instruments:
        raise UsageError(f"{endog!r} cannot instrument itself")
    used = set(exog) | set(instruments) | ({endog} if endog else set())
    if depvar in used:
        raise UsageError(f"dependent variable {depvar!r} reappears as a "
                         "regressor or instrument")

    variant = "qiv" if ns.uncensored else ("cqr" if ns.exogenous else "cqiv")
    config = CqivConfig(
        quantiles=_quantile_fractions(ns.quantiles),
        variant=variant,
        censor_point=ns.censorpt,
        censor_side="right" if ns.top else "left",
        first_stage=FirstStageSpec(
            method=ns.firststage,
            n_quant=ns.nquant,
            n_thresh=ns.nthresh,
            ldv1=ns.ldv1,
            exclude_exogenous=ns.exclude,
        ),
        ldv2=ns.ldv2,
        q0=ns.drop1,
        q1=ns.drop2,
        corner=ns.corner,
        confidence="none" if ns.confidence == "no" else ns.confidence,
        bootreps=ns.bootreps,
        seed=ns.setseed,
        level=ns.level,
        norobust=ns.norobust,
    )
    return CliInvocation(
        data_path=ns.data,
        depvar=depvar,
        exog=exog,
        endog=endog,
        instruments=instruments,
        config=config,
        out=ns.out,
        viewlog=ns.viewlog,
        filters=_parse_filters(ns.filter),
        weight_column=ns.weight,
    )


# -------------------------------------------------------------------
# data loading
# -------------------------------------------------------------------


def load_csv(path: str, invocation: CliInvocation) -> tuple[Dataset, int]:
    """Read the referenced columns; rows with a missing or non-numeric
    referenced field are dropped and counted.

    Returns (dataset, dropped_row_count).
    """
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}")
    except Exception as err:
        raise DataError(f"cannot read {path}: {err}")

    referenced = [invocation.depvar, *invocation.exog]
    if invocation.endog is not None:
        referenced.append(invocation.endog)
    referenced.extend(invocation.instruments)
    referenced.extend(col for col, _, _ in invocation.filters)
    if invocation.weight_column is not None:
        referenced.append(invocation.weight_column)
    referenced = list(dict.fromkeys(referenced))

    missing = [c for c in referenced if c not in frame.columns]
    if missing:
        raise DataError(f"column(s) not in {path}: {', '.join(missing)}")

    numeric = frame[referenced].apply(pd.to_numeric, errors="coerce")
    keep = numeric.notna().all(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        logger.warning(
            "%d of %d rows dropped (missing or non-numeric referenced fields)",
            dropped, len(frame),
        )
    numeric = numeric.loc[keep]
    for col, lo, hi in invocation.filters:
        numeric = numeric.loc[(numeric[col] >= lo) & (numeric[col] <= hi)]
    n = len(numeric)
    if n == 0:
        raise DataError("no usable rows after cleaning and filters")
    logger.info("estimation sample: %d rows", n)

    def col(name):
        return numeric[name].to_numpy(dtype=float)

    weights = None
    if invocation.weight_column is not None:
        weights = col(invocation.weight_column)
    try:
        return Dataset(
            y=col(invocation.depvar),
            w=numeric[list(invocation.exog)].to_numpy(dtype=float).reshape(
                n, len(invocation.exog)),
            w_labels=invocation.exog,
            d=None if invocation.endog is None else col(invocation.endog),
            d_label=invocation.endog or "d",
            z=None if not invocation.instruments else numeric[
                list(invocation.instruments)].to_numpy(dtype=float),
            z_labels=invocation.instruments,
            y_label=invocation.depvar,
            weights=weights,
        ), dropped
    except InvalidArgumentError as err:
        raise DataError(str(err))


def _derived_columns(d, w, labels) -> tuple[str, ...]:
    """Exogenous columns that are (nonlinear) polynomials in the
    endogenous regressor, degree up to 4.

    Such columns make the regression function nonlinear in the
    regressor, which the corner-effect formula cannot represent.
    """
    n = d.size
    degree = min(4, max(2, n - 2))
    powers = np.column_stack([d**k for k in range(degree + 1)])
    linear = powers[:, :2]
    found = []
    for j, label in enumerate(labels):
        col = w[:, j]
        scale = max(1.0, float(np.linalg.norm(col)))
        full_res = _lstsq_residual(powers, col)
        lin_res = _lstsq_residual(linear, col)
        if full_res < 1e-8 * scale and lin_res > 1e-6 * scale:
            found.append(label)
    return tuple(found)


def _lstsq_residual(a, b) -> float:
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    return float(np.linalg.norm(b - a @ coef))


# -------------------------------------------------------------------
# output
# -------------------------------------------------------------------


def _pct(u: float) -> float:
    return float(round(u * 100.0, 10))


def build_result_document(result: CqivResult) -> dict:
    """The JSON payload; top-level names follow the saved-results
    vocabulary of the Stata command."""
    cfg = result.config
    corner_on = cfg.corner
    endog_label = result.names["endogvar"]
    endog_idx = (
        result.labels.index(endog_label) if endog_label in result.labels
        else None
    )
    results = []
    for fit in result.fits:
        coef = [float(v) for v in fit.beta3]
        if corner_on and fit.corner_effect is not None and endog_idx is not None:
            coef[endog_idx] = float(fit.corner_effect)
        mean, lower, upper = [], [], []
        if result.ci is not None and fit.u in result.ci:
            block = result.ci[fit.u]
            mean = [float(v) for v in block["mean"]]
            lower = [float(v) for v in block["lower"]]
            upper = [float(v) for v in block["upper"]]
            if corner_on and "corner_mean" in block and endog_idx is not None:
                mean[endog_idx] = block["corner_mean"]
                lower[endog_idx] = block["corner_lower"]
                upper[endog_idx] = block["corner_upper"]
        results.append({
            "quantile": _pct(fit.u),
            "coefficients": list(result.labels),
            "coefficient": coef,
            "mean": mean,
            "lower": lower,
            "upper": upper,
        })
    robustcheck = [
        [
            _pct(fit.u),
            fit.diagnostics.pct_kept_step1,
            fit.diagnostics.pct_kept_step2,
            fit.diagnostics.pct_step1_lost,
            1 if fit.diagnostics.complete else 0,
        ]
        for fit in result.fits
        if fit.diagnostics is not None
    ]
    return {
        "obs": int(result.n),
        "censorpt": float(cfg.censor_point),
        "drop1": float(cfg.q0),
        "drop2": float(cfg.q1),
        "bootreps": int(cfg.bootreps),
        "level": float(cfg.level),
        "command": "cqiv",
        "regression": cfg.variant,
        "depvar": str(result.names["depvar"]),
        "endogvar": str(result.names["endogvar"]),
        "instrument": " ".join(result.names["instruments"]),
        "firststage": "" if cfg.variant == "cqr" else cfg.first_stage.method,
        "confidence": "no" if cfg.confidence == "none" else cfg.confidence,
        "results": results,
        "quantiles": [_pct(fit.u) for fit in result.fits],
        "robustcheck": robustcheck,
    }


def render_table(result: CqivResult, dropped: int = 0) -> str:
    cfg = result.config
    lines = [_TITLES[cfg.variant]]
    obs = f"observations: {result.n}"
    if dropped:
        obs += f" ({dropped} dropped)"
    lines.append(obs)
    if cfg.variant != "qiv":
        side = "above" if cfg.censor_side == "right" else "below"
        lines.append(f"censoring: from {side} at {cfg.censor_point:g}")
    if cfg.variant != "cqr":
        lines.append(f"first stage: {cfg.first_stage.method}")
    with_ci = result.ci is not None
    endog_label = result.names["endogvar"]
    if cfg.corner:
        lines.append(
            f"the {endog_label} row reports the corner marginal effect"
        )
    for fit in result.fits:
        lines.append("")
        lines.append(f"quantile {_pct(fit.u):g}")
        header = f"  {'coefficient':<14}{'estimate':>12}"
        if with_ci:
            header += f"{'lower':>12}{'upper':>12}{'mean':>12}"
        lines.append(header)
        block = result.ci.get(fit.u) if with_ci else None
        for j, label in enumerate(result.labels):
            value = float(fit.beta3[j])
            lo = hi = mu = None
            if block is not None:
                lo, hi = float(block["lower"][j]), float(block["upper"][j])
                mu = float(block["mean"][j])
            if cfg.corner and label == endog_label and fit.corner_effect is not None:
                value = float(fit.corner_effect)
                if block is not None and "corner_mean" in block:
                    lo, hi = block["corner_lower"], block["corner_upper"]
                    mu = block["corner_mean"]
            row = f"  {label:<14}{value:>12.6f}"
            if block is not None:
                row += f"{lo:>12.6f}{hi:>12.6f}{mu:>12.6f}"
            lines.append(row)
    for u, message in result.failures:
        lines.append("")
        lines.append(f"quantile {_pct(u):g}: FAILED ({message})")
    diag = [f for f in result.fits if f.diagnostics is not None]
    if diag and not cfg.norobust:
        lines.append("")
        lines.append("selection diagnostics (percent of sample)")
        lines.append(
            f"  {'quantile':>8}{'step 1':>10}{'step 2':>10}"
            f"{'step1 lost':>12}{'complete':>10}"
        )
        for fit in diag:
            row = fit.diagnostics
            lines.append(
                f"  {_pct(fit.u):>8g}{row.pct_kept_step1:>10.2f}"
                f"{row.pct_kept_step2:>10.2f}{row.pct_step1_lost:>12.2f}"
                f"{'yes' if row.complete else 'no':>10}"
            )
    lines.append("")
    return "\n".join(lines)


def write_document(doc: dict, path: str) -> None:
    payload = json.dumps(doc, indent=2) + "\n"
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(payload)
    except OSError as err:
        raise DataError(f"cannot write result document {path}: {err}")


def _enable_viewlog() -> None:
    log = logging.getLogger("cqiv")
    if not any(getattr(h, "_cqiv_viewlog", False) for h in log.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        handler._cqiv_viewlog = True
        log.addHandler(handler)
    log.setLevel(logging.INFO)


# -------------------------------------------------------------------
# entry points
# -------------------------------------------------------------------


def main(argv=None) -> int:
    args = list(sys.argv[1:]) if argv is None else list(argv)
    if args and args[0] == "simulate":
        return _simulate_main(args[1:])
    try:
        invocation = parse_invocation(args)
    except (UsageError, InvalidArgumentError) as err:
        print(f"cqiv: error: {err}", file=sys.stderr)
        return 2
    if invocation.viewlog:
        _enable_viewlog()
    try:
        dataset, dropped = load_csv(invocation.data_path, invocation)
        config = invocation.config
        if config.corner and dataset.d is not None:
            derived = _derived_columns(dataset.d, dataset.w, dataset.w_labels)
            if derived:
                config = replace(config, endog_derived=derived)
        result = run_with_inference(dataset, config)
        doc = build_result_document(result)
        sys.stdout.write(render_table(result, dropped))
        write_document(doc, invocation.out)
    except CqivError as err:
        print(f"cqiv: error: {err}", file=sys.stderr)
        return 1
    if not result.fits:
        print("cqiv: error: every requested quantile failed", file=sys.stderr)
        return 1
    return 2 if result.failures else 0


def _build_simulate_parser() -> _Parser:
    p = _Parser(
        prog="cqiv simulate",
        description="Monte Carlo study on the synthetic triangular model; "
        "writes a bias/RMSE/coverage table as CSV.",
        allow_abbrev=False,
    )
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--rho", type=float, default=0.5,
                   help="endogeneity correlation")
    p.add_argument("--censorpt", type=float, default=0.0)
    p.add_argument("--quantiles", nargs="+", default=["50"], metavar="PCT")
    p.add_argument("--firststage",
                   choices=["quantile", "distribution", "ols"],
                   default="quantile")
    p.add_argument("--exclude", action="store_true")
    p.add_argument("--nquant", type=int, default=50)
    p.add_argument("--nthresh", type=int, default=50)
    p.add_argument("--ldv1", choices=["probit", "logit"], default="probit")
    p.add_argument("--ldv2", choices=["probit", "logit"], default="probit")
    p.add_argument("--drop1", type=float, default=10.0)
    p.add_argument("--drop2", type=float, default=3.0)
    p.add_argument("--confidence", choices=["no", "boot", "weightedboot"],
                   default="no")
    p.add_argument("--bootreps", type=int, default=100)
    p.add_argument("--setseed", type=int, default=777)
    p.add_argument("--level", type=float, default=95.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="-", help="CSV path, - for stdout")
    return p


def _simulate_main(args) -> int:
    try:
        ns = _build_simulate_parser().parse_args(list(args))
        spec = DgpSpec(n=ns.n, rho=ns.rho, censor_point=ns.censorpt)
        config = CqivConfig(
            quantiles=_quantile_fractions(ns.quantiles),
            censor_point=ns.censorpt,
            first_stage=FirstStageSpec(
                method=ns.firststage,
                n_quant=ns.nquant,
                n_thresh=ns.nthresh,
                ldv1=ns.ldv1,
                exclude_exogenous=ns.exclude,
            ),
            ldv2=ns.ldv2,
            q0=ns.drop1,
            q1=ns.drop2,
            confidence="none" if ns.confidence == "no" else ns.confidence,
            bootreps=ns.bootreps,
            seed=ns.setseed,
            level=ns.level,
        )
    except (UsageError, InvalidArgumentError) as err:
        print(f"cqiv: error: {err}", file=sys.stderr)
        return 2
    try:
        rows = monte_carlo(spec, ns.reps, config=config, seed=ns.setseed,
                           n_jobs=ns.jobs)
        _write_simulation_csv(rows, ns.out)
    except CqivError as err:
        print(f"cqiv: error: {err}", file=sys.stderr)
        return 1
    return 0


def _write_simulation_csv(rows, out: str) -> None:
    fields = ["quantile", "coefficient", "truth", "mean", "bias", "rmse",
              "coverage", "reps_used", "reps_failed"]

    def emit(fh):
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            record = dict(row)
            record["quantile"] = _pct(row["quantile"])
            if record["coverage"] is None:
                record["coverage"] = ""
            writer.writerow(record)

    if out == "-":
        emit(sys.stdout)
    else:
        try:
            with open(out, "w", encoding="utf-8", newline="") as fh:
                emit(fh)
        except OSError as err:
            raise DataError(f"cannot write {out}: {err}")
