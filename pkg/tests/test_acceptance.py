"""Release gate for the package's headline guarantees.

Each test prints one PASS or FAIL line so a full run doubles as a
sign-off report. The simulation-based checks share one module-scoped
sweep (three first-stage methods, 100 replications each); the check
loss and binary model checks run against the independent oracles in
oracles.py.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from cqiv.cli import build_result_document, main, parse_invocation
from cqiv.control_stage import FirstStageSpec
from cqiv.engine import CqivConfig, Dataset, build_design, run
from cqiv.inference import run_with_inference, weighted_bootstrap
from cqiv.numkit import (
    DesignMatrix,
    binary_mle_fit,
    check_loss,
    get_link,
    solve_wqr,
)
from cqiv.simlab import DgpSpec, generate, monte_carlo

from oracles import qr_enumerate

QUANTILES = (0.25, 0.5, 0.75)
SWEEP_REPS = 100
SWEEP_SEED = 20260824

SWEEP_CONFIGS = {
    "quantile/probit": CqivConfig(quantiles=QUANTILES),
    "ols/logit": CqivConfig(
        quantiles=QUANTILES,
        first_stage=FirstStageSpec(method="ols"),
        ldv2="logit",
    ),
    "distribution/probit": CqivConfig(
        quantiles=QUANTILES,
        first_stage=FirstStageSpec(method="distribution"),
    ),
}


def _verdict(capsys, index, label, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {index:>2}. {label}"
    if detail:
        line += f"  ({detail})"
    with capsys.disabled():
        print(line)
    assert ok, line


# -------------------------------------------------------------------------
# shared fixtures
# -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def qr_instances():
    """200 small random quantile regression problems, solved twice:
    by the production solver and by exhaustive vertex enumeration."""
    rng = np.random.default_rng(SWEEP_SEED)
    grid = np.arange(1, 10) / 10.0
    out = []
    t0 = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(5, 31))
        p = int(rng.integers(1, 4))
        x = np.column_stack(
            [np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)]
        )
        y = x.sum(axis=1) + rng.normal(size=n) * rng.uniform(0.5, 2.0)
        u = float(rng.choice(grid))
        beta = solve_wqr(x, y, u)
        obj = float(np.sum(check_loss(y - x @ beta, u)))
        _, obj_star = qr_enumerate(x, y, u)
        out.append((x, y, u, beta, obj, obj_star))
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def simulation_sweep():
    """100 replications of the default simulated model per first-stage
    method, keeping the per-quantile selection internals."""
    spec = DgpSpec()
    per_config = {name: [] for name in SWEEP_CONFIGS}
    censored = []
    t0 = time.perf_counter()
    for r in range(SWEEP_REPS):
        data, truth, _ = generate(spec, seed=SWEEP_SEED, stream=r)
        censored.append(float(np.mean(data.y == spec.censor_point)))
        for name, config in SWEEP_CONFIGS.items():
            res = run(data, config)
            rep = {"failures": len(res.failures), "labels": res.labels}
            for f in res.fits:
                st = f.selection
                prob_rule = st.prob_uncensored > (1.0 - f.u) + st.prob_cut
                rep[f.u] = {
                    "slope": float(f.beta3[res.labels.index("d")]),
                    "agree": bool(np.array_equal(prob_rule, st.keep1)),
                    "nested": bool(np.all(st.keep2[st.keep1])),
                    "n1": int(np.sum(st.keep1)),
                    "n2": int(np.sum(st.keep2)),
                    "lost": int(np.sum(st.keep1 & ~st.keep2)),
                    "diag": f.diagnostics,
                }
            per_config[name].append(rep)
    elapsed = time.perf_counter() - t0
    truth_slope = float(truth.coefficients(0.5)[truth.labels.index("d")])
    return {
        "per_config": per_config,
        "n": spec.n,
        "truth_slope": truth_slope,
        "censored_share": float(np.mean(censored)),
        "elapsed": elapsed,
    }


# -------------------------------------------------------------------------
# the checks
# -------------------------------------------------------------------------


def test_01_qr_objective_matches_enumeration(qr_instances, capsys):
    instances, elapsed = qr_instances
    worst = max(
        abs(obj - star) / (1.0 + abs(star))
        for _, _, _, _, obj, star in instances
    )
    ok = worst <= 1e-8 and elapsed < 10.0
    _verdict(
        capsys, 1, "quantile regression equals vertex enumeration",
        ok, f"max relative gap {worst:.1e}, {elapsed:.2f}s for 200 instances",
    )


def test_02_qr_sign_balance_everywhere(qr_instances, capsys):
    instances, _ = qr_instances
    bad = 0
    for x, y, u, beta, _, _ in instances:
        n, p = x.shape
        r = y - x @ beta
        tol = 1e-8 * (1.0 + np.abs(y).max())
        if not (np.sum(r < -tol) <= u * n and np.sum(r <= tol) >= u * n - p):
            bad += 1
    _verdict(
        capsys, 2, "residual sign balance at every solution",
        bad == 0, f"{bad} of {len(instances)} instances violated",
    )


def test_03_binary_model_score_and_optimum(capsys):
    rng = np.random.default_rng(7)
    worst_fd = 0.0
    worst_grad = 0.0
    for kind in ("probit", "logit"):
        link = get_link(kind)
        for _ in range(10):
            n = int(rng.integers(40, 120))
            p = int(rng.integers(1, 4))
            s = np.column_stack(
                [np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)]
            )
            while True:
                t = (
                    rng.uniform(size=n) < link.cdf(s @ rng.normal(size=p))
                ).astype(float)
                if 0.0 < t.mean() < 1.0:
                    break
            sm = DesignMatrix(s, tuple(f"s{j}" for j in range(p)))

            def total(delta):
                ll, _, _ = link.loglik_terms(s @ delta, t)
                return float(ll.sum())

            delta0 = rng.normal(size=p) * 0.5
            _, score_terms, _ = link.loglik_terms(s @ delta0, t)
            score = s.T @ score_terms
            for j in range(p):
                h = 1e-6 * (1.0 + abs(delta0[j]))
                e = np.zeros(p)
                e[j] = h
                fd = (total(delta0 + e) - total(delta0 - e)) / (2.0 * h)
                worst_fd = max(
                    worst_fd, abs(fd - score[j]) / (1.0 + abs(score[j]))
                )

            fit = binary_mle_fit(sm, t, link)
            _, score_opt, _ = link.loglik_terms(s @ fit.delta, t)
            worst_grad = max(worst_grad, float(np.max(np.abs(s.T @ score_opt))))
    ok = worst_fd <= 1e-5 and worst_grad < 1e-8
    _verdict(
        capsys, 3, "binary model score and optimum",
        ok, f"score vs differences {worst_fd:.1e}, score at optimum {worst_grad:.1e}",
    )


def test_04_inactive_censoring_is_plain_qr(capsys):
    data, _, _ = generate(DgpSpec(n=500), seed=11, stream=0)
    config = CqivConfig(
        quantiles=QUANTILES, variant="cqr", censor_point=float(data.y.min()) - 1.0
    )
    res = run(data, config)
    x, _, _ = build_design(data, config)
    worst = 0.0
    for f in res.fits:
        plain = solve_wqr(x, data.y, f.u)
        worst = max(worst, float(np.max(np.abs(f.beta3 - plain))))
    ok = len(res.fits) == 3 and worst <= 1e-8 and not res.censoring_active
    _verdict(
        capsys, 4, "censoring point below the support reduces to plain QR",
        ok, f"max coefficient gap {worst:.1e}",
    )


def test_05_simulation_recovers_slope(simulation_sweep, capsys):
    sweep = simulation_sweep
    target = sweep["truth_slope"]
    worst_bias = 0.0
    worst_rmse = 0.0
    short = 0
    for rows in sweep["per_config"].values():
        for u in QUANTILES:
            slopes = np.array([rep[u]["slope"] for rep in rows if u in rep])
            if len(slopes) < SWEEP_REPS:
                short += 1
                continue
            worst_bias = max(worst_bias, abs(float(slopes.mean()) - target))
            worst_rmse = max(
                worst_rmse, float(np.sqrt(np.mean((slopes - target) ** 2)))
            )
    ok = (
        short == 0
        and worst_bias < 0.05 * abs(target)
        and worst_rmse < 0.15 * abs(target)
        and sweep["elapsed"] < 600.0
        and abs(sweep["censored_share"] - 0.40) < 0.02
    )
    _verdict(
        capsys, 5, "simulation recovery for all three first stages",
        ok,
        f"worst bias {worst_bias:.4f} (limit {0.05 * abs(target):.2f}), "
        f"worst rmse {worst_rmse:.4f} (limit {0.15 * abs(target):.2f}), "
        f"censored {sweep['censored_share']:.0%}, {sweep['elapsed']:.0f}s",
    )


def test_06_selection_rule_forms_agree(simulation_sweep, capsys):
    sweep = simulation_sweep
    mismatched = 0
    cells = 0
    for rows in sweep["per_config"].values():
        for rep in rows:
            for u in QUANTILES:
                if u in rep:
                    cells += 1
                    if not rep[u]["agree"]:
                        mismatched += 1
    ok = mismatched == 0 and cells == 3 * SWEEP_REPS * len(QUANTILES)
    _verdict(
        capsys, 6, "probability-scale and index-scale selection agree",
        ok, f"{mismatched} mismatched fits of {cells} (probit and logit)",
    )


def test_07_censoring_side_duality(capsys):
    data, _, _ = generate(DgpSpec(n=400), seed=5, stream=3)
    top = Dataset(
        y=-data.y, w=data.w, w_labels=data.w_labels,
        d=data.d, d_label=data.d_label, z=data.z, z_labels=data.z_labels,
    )
    config_top = CqivConfig(
        quantiles=QUANTILES, censor_side="right", censor_point=0.0,
        corner=True, confidence="weightedboot", bootreps=12,
    )
    res_top = run_with_inference(top, config_top)

    mirrored = Dataset(
        y=data.y, w=data.w, w_labels=data.w_labels,
        d=data.d, d_label=data.d_label, z=data.z, z_labels=data.z_labels,
    )
    config_left = replace(
        config_top, censor_side="left", censor_point=-config_top.censor_point
    )
    res_left = run_with_inference(mirrored, config_left)

    ok = not res_top.failures and not res_left.failures
    for ft, fl in zip(res_top.fits, res_left.fits):
        ok &= np.array_equal(ft.beta2, -fl.beta2)
        ok &= np.array_equal(ft.beta3, -fl.beta3)
        ok &= ft.corner_effect == -fl.corner_effect
        ok &= np.array_equal(ft.selection.keep1, fl.selection.keep1)
        ok &= np.array_equal(ft.selection.keep2, fl.selection.keep2)
        ok &= ft.diagnostics == fl.diagnostics
        bt, bl = res_top.ci[ft.u], res_left.ci[fl.u]
        ok &= np.array_equal(bt["lower"], -bl["upper"])
        ok &= np.array_equal(bt["upper"], -bl["lower"])
        ok &= np.array_equal(bt["mean"], -bl["mean"])
        ok &= bt["corner_lower"] == -bl["corner_upper"]
        ok &= bt["corner_upper"] == -bl["corner_lower"]
    _verdict(
        capsys, 7, "top-censored run mirrors the negated bottom-censored run",
        bool(ok), "coefficients, selections, corner effects, intervals",
    )


def test_08_bootstrap_anchor_and_coverage(capsys, monkeypatch):
    # unit-weight draw must reproduce the final coefficients bitwise
    data, _, _ = generate(DgpSpec(n=300), seed=9, stream=77)
    config = CqivConfig(quantiles=(0.25, 0.5), corner=True, bootreps=1)
    anchor = run(data, config)
    with monkeypatch.context() as m:
        m.setattr(
            "cqiv.inference.draw_exponential_weights",
            lambda rng, n: np.ones(n),
        )
        beta_draws, corner_draws = weighted_bootstrap(data, config, anchor)
    exact = bool(anchor.fits)
    for f in anchor.fits:
        exact &= np.array_equal(beta_draws[f.u][0], f.beta3)
        exact &= float(corner_draws[f.u][0]) == f.corner_effect

    cover_config = CqivConfig(
        quantiles=(0.5,),
        first_stage=FirstStageSpec(method="ols"),
        confidence="weightedboot",
        bootreps=200,
    )
    rows = monte_carlo(DgpSpec(), 100, config=cover_config, seed=SWEEP_SEED)
    row = next(r for r in rows if r["coefficient"] == "d")
    coverage = row["coverage"]
    ok = exact and row["reps_used"] == 100 and 0.88 <= coverage <= 0.99
    _verdict(
        capsys, 8, "bootstrap reproduces the anchor and covers the slope",
        ok, f"unit-weight draw exact: {exact}, coverage {coverage:.0%} of 100",
    )


def test_09_byte_identical_documents(capsys, tmp_path):
    data, _, _ = generate(DgpSpec(n=150), seed=13, stream=1)
    csv = tmp_path / "sample.csv"
    pd.DataFrame(
        {"y": data.y, "d": data.d, "w": data.w[:, 0], "z": data.z[:, 0]}
    ).to_csv(csv, index=False)
    outs = [tmp_path / "a.json", tmp_path / "b.json"]
    codes = [
        main([
            str(csv), "y", "w", "(d", "=", "z)",
            "--quantiles", "25", "50",
            "--confidence", "weightedboot", "--bootreps", "8",
            "--setseed", "1234", "--out", str(out),
        ])
        for out in outs
    ]
    cli_ok = codes == [0, 0] and outs[0].read_bytes() == outs[1].read_bytes()

    config = CqivConfig(
        quantiles=(0.5,), confidence="weightedboot", bootreps=16
    )
    serial = build_result_document(run_with_inference(data, config, n_jobs=1))
    parallel = build_result_document(run_with_inference(data, config, n_jobs=2))
    par_ok = json.dumps(serial, indent=2) == json.dumps(parallel, indent=2)
    _verdict(
        capsys, 9, "repeated and parallel runs emit byte-identical documents",
        cli_ok and par_ok,
        f"cli reruns equal: {cli_ok}, worker count invariant: {par_ok}",
    )


def test_10_default_options(capsys):
    inv = parse_invocation(["data.csv", "y", "w", "(d", "=", "z)"])
    config = inv.config
    checks = {
        "censor point 0": config.censor_point == 0.0,
        "quantile first stage": config.first_stage.method == "quantile",
        "50 grid points": config.first_stage.n_quant == 50,
        "50 thresholds": config.first_stage.n_thresh == 50,
        "probit first stage link": config.first_stage.ldv1 == "probit",
        "probit selection link": config.ldv2 == "probit",
        "drop 10 percent": config.q0 == 10.0,
        "trim 3 percent": config.q1 == 3.0,
        "100 repetitions": config.bootreps == 100,
        "seed 777": config.seed == 777,
        "95 percent level": config.level == 95.0,
    }
    bad = [name for name, good in checks.items() if not good]
    _verdict(
        capsys, 10, "bare invocation uses the documented defaults",
        not bad, "all eleven defaults" if not bad else f"wrong: {bad}",
    )


def test_11_selection_diagnostics(simulation_sweep, capsys):
    sweep = simulation_sweep
    n = sweep["n"]
    inconsistent = 0
    min_share = 1.0
    for rows in sweep["per_config"].values():
        nested_reps = 0
        for rep in rows:
            nested = True
            for u in QUANTILES:
                cell = rep.get(u)
                if cell is None:
                    nested = False
                    continue
                nested &= cell["nested"]
                diag = cell["diag"]
                same = (
                    diag.pct_kept_step1 == 100.0 * cell["n1"] / n
                    and diag.pct_kept_step2 == 100.0 * cell["n2"] / n
                    and diag.pct_step1_lost == 100.0 * cell["lost"] / cell["n1"]
                    and diag.complete
                )
                if not same:
                    inconsistent += 1
            nested_reps += nested
        min_share = min(min_share, nested_reps / len(rows))
    ok = min_share >= 0.90 and inconsistent == 0
    _verdict(
        capsys, 11, "step-1 sample nests in step-2 and diagnostics add up",
        ok,
        f"worst nesting share {min_share:.0%}, "
        f"{inconsistent} inconsistent diagnostic rows",
    )
