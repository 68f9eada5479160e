"""Synthetic data and Monte Carlo harness for the estimators.

The generating process is a triangular system: the endogenous regressor
is linear in one exogenous regressor, one excluded instrument, and a
uniform disturbance rank; the latent outcome is linear in the
regressor, the exogenous variable, and the normal scores of both the
endogenous rank and an independent uniform; the observed outcome is
censored from below. Conditional quantiles of the latent outcome given
(regressor, exogenous, rank) are then exactly linear in the design the
estimator builds, which pins down a closed-form truth table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .engine import CqivConfig, Dataset, run
from .errors import InvalidArgumentError
from .inference import run_with_inference
from .numkit import std_normal_quantile

__all__ = ["DgpSpec", "TruthTable", "generate", "monte_carlo"]


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the simulated triangular model.

    With the defaults 40 percent of outcomes are censored at 0 and the
    instrument is strong. The default signal scale (outcome slope 2,
    instrument coefficient 2 against a unit disturbance scale) keeps
    the two selection rankings of the estimator nearly aligned, so the
    step-1 sample is contained in the step-2 sample in the vast
    majority of replications at this n.
    """

    n: int = 1000
    beta00: float = -0.684
    beta01: float = 2.0
    beta02: float = 1.0
    pi_const: float = 1.0
    pi_w: float = 0.5
    pi_z: float = 2.0
    sigma_v: float = 1.0
    rho: float = 0.5
    censor_point: float = 0.0

    def __post_init__(self):
        if int(self.n) < 10:
            raise InvalidArgumentError("n must be at least 10")
        object.__setattr__(self, "n", int(self.n))
        if not self.sigma_v > 0.0:
            raise InvalidArgumentError("sigma_v must be positive")
        if not abs(self.rho) < 1.0:
            raise InvalidArgumentError("rho must lie strictly in (-1, 1)")


@dataclass(frozen=True)
class TruthTable:
    """Closed-form coefficients of the conditional quantile function.

    Aligned with the design the estimator builds from the generated
    dataset: (endogenous, exogenous, constant, control). Only the
    constant moves with the quantile index.
    """

    spec: DgpSpec
    labels: tuple[str, ...] = ("d", "w", "const", "control")

    def coefficients(self, u: float) -> np.ndarray:
        s = self.spec
        shift = math.sqrt(1.0 - s.rho**2) * float(std_normal_quantile(u))
        return np.array([s.beta01, s.beta02, s.beta00 + shift, s.rho])


def generate(spec: DgpSpec, seed: int = 0, stream: int = 0):
    """One simulated sample.

    Returns (dataset, truth, latents); latents holds the uncensored
    outcome and the uniform disturbance ranks. The dataset carries no
    censoring column: estimate with censor_point = spec.censor_point.
    Streams are keyed by (seed, stream), in a key space separate from
    the bootstrap repetition streams so a replication's data can never
    share a stream with its own bootstrap weights.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(1, int(stream)))
    rng = np.random.Generator(np.random.Philox(ss))
    n = spec.n
    w = rng.normal(size=n)
    z = rng.normal(size=n)
    v = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    uu = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    d = (
        spec.pi_const + spec.pi_w * w + spec.pi_z * z
        + spec.sigma_v * std_normal_quantile(v)
    )
    ystar = (
        spec.beta00 + spec.beta01 * d + spec.beta02 * w
        + spec.rho * std_normal_quantile(v)
        + math.sqrt(1.0 - spec.rho**2) * std_normal_quantile(uu)
    )
    y = np.maximum(ystar, spec.censor_point)
    dataset = Dataset(
        y=y,
        w=w[:, None],
        w_labels=("w",),
        d=d,
        d_label="d",
        z=z[:, None],
        z_labels=("z",),
    )
    latents = {"ystar": ystar, "v": v, "u": uu}
    return dataset, TruthTable(spec), latents


def _one_rep(spec, config, seed, rep):
    data, _, _ = generate(spec, seed=seed, stream=rep)
    if config.confidence != "none":
        res = run_with_inference(data, config)
    else:
        res = run(data, config)
    out = {}
    for f in res.fits:
        interval = None
        if res.ci is not None:
            block = res.ci[f.u]
            interval = (block["lower"], block["upper"])
        out[f.u] = (f.beta3, interval)
    for u, message in res.failures:
        out[u] = message
    return out, res.labels


def monte_carlo(
    spec: DgpSpec,
    n_reps: int,
    config: CqivConfig | None = None,
    seed: int = 0,
    n_jobs: int = 1,
):
    """Replicate the estimator over fresh samples and summarize.

    Returns a list of tidy rows, one per (quantile, coefficient):
    quantile, coefficient label, truth, mean estimate, bias, rmse,
    coverage (None without intervals), reps_used, reps_failed. Failed
    replications are excluded from the statistics and counted.
    """
    if n_reps < 1:
        raise InvalidArgumentError("n_reps must be a positive integer")
    if config is None:
        config = CqivConfig(censor_point=spec.censor_point)
    truth = TruthTable(spec)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_one_rep)(spec, config, seed, rep) for rep in range(n_reps)
    )
    labels = results[0][1]
    if tuple(labels) != truth.labels:
        raise InvalidArgumentError(
            f"estimator design {labels} does not match the truth table "
            f"{truth.labels}"
        )
    rows = []
    for u in config.quantiles:
        est, lower, upper = [], [], []
        failed = 0
        for rep_out, _ in results:
            got = rep_out.get(u)
            if got is None or isinstance(got, str):
                failed += 1
                continue
            beta, interval = got
            est.append(beta)
            if interval is not None:
                lower.append(interval[0])
                upper.append(interval[1])
        true = truth.coefficients(u)
        if not est:
            for j, label in enumerate(labels):
                rows.append({
                    "quantile": u, "coefficient": label, "truth": true[j],
                    "mean": np.nan, "bias": np.nan, "rmse": np.nan,
                    "coverage": None, "reps_used": 0, "reps_failed": failed,
                })
            continue
        est = np.array(est)
        cover = None
        if lower:
            lo = np.array(lower)
            hi = np.array(upper)
            cover = np.mean((lo <= true) & (true <= hi), axis=0)
        mean = est.mean(axis=0)
        rmse = np.sqrt(np.mean((est - true) ** 2, axis=0))
        for j, label in enumerate(labels):
            rows.append({
                "quantile": u,
                "coefficient": label,
                "truth": float(true[j]),
                "mean": float(mean[j]),
                "bias": float(mean[j] - true[j]),
                "rmse": float(rmse[j]),
                "coverage": None if cover is None else float(cover[j]),
                "reps_used": int(est.shape[0]),
                "reps_failed": failed,
            })
    return rows
