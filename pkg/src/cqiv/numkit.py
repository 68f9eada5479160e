"""Deterministic numerical kernels for quantile-based estimation.

Provides the weighted quantile regression solver (interior point on the
linear-programming dual, with a vertex polish step), weighted probit and
logit maximum likelihood, weighted least squares with a residual scale,
and the standard normal cdf/quantile pair. Everything here is pure
numpy/scipy with no hidden random state: identical inputs give identical
outputs bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import special as sp

from .errors import (
    ConvergenceError,
    DegenerateOutcomeError,
    EmptySampleError,
    InsufficientSampleError,
    InvalidArgumentError,
    SeparationError,
    SingularDesignError,
)

__all__ = [
    "DesignMatrix",
    "LinkFunction",
    "PROBIT",
    "LOGIT",
    "get_link",
    "check_loss",
    "solve_wqr",
    "wqr_fit",
    "WqrFit",
    "fit_binary_mle",
    "binary_mle_fit",
    "BinaryMleFit",
    "ols_fit",
    "OlsFit",
    "std_normal_cdf",
    "std_normal_quantile",
    "as_weight_vector",
    "nearest_rank_percentile",
]

_STEP_SHRINK = 0.9995  # fraction-to-boundary factor for interior point steps


# --------------------------------------------------------------------------
# data containers and validation helpers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignMatrix:
    """A dense regressor matrix with one label per column.

    Parameters
    ----------
    values : ndarray of shape (n, p)
        Regressor values, all finite.
    labels : tuple of str
        Column labels, unique, one per column.
    """

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidArgumentError("design values must be a 2-d array")
        n, p = values.shape
        if n < 1 or p < 1:
            raise InvalidArgumentError("design needs at least one row and one column")
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("design values must be finite")
        labels = tuple(str(s) for s in self.labels)
        if len(labels) != p:
            raise InvalidArgumentError(
                f"got {len(labels)} labels for {p} design columns"
            )
        if len(set(labels)) != len(labels):
            raise InvalidArgumentError("design labels must be unique")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def column(self, label: str) -> np.ndarray:
        try:
            j = self.labels.index(label)
        except ValueError:
            raise InvalidArgumentError(f"no design column labeled {label!r}") from None
        return self.values[:, j]


def as_weight_vector(weights, n: int) -> np.ndarray:
    """Validate observation weights; None means unit weights.

    Weights must be finite, nonnegative, with at least one strictly
    positive entry. Returns a float array of length n.
    """
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise InvalidArgumentError(f"weights must have shape ({n},), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("weights must be finite")
    if np.any(w < 0):
        raise InvalidArgumentError("weights must be nonnegative")
    if not np.any(w > 0):
        raise EmptySampleError("all observation weights are zero")
    return w


def _as_design(x, labels=None) -> DesignMatrix:
    if isinstance(x, DesignMatrix):
        return x
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if labels is None:
        labels = tuple(f"x{j}" for j in range(x.shape[1]))
    return DesignMatrix(x, tuple(labels))


def _check_response(y, n: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise InvalidArgumentError(f"{name} must have shape ({n},), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError(f"{name} must be finite")
    return y


def _check_rank(values: np.ndarray, labels: tuple[str, ...]) -> None:
    """Raise SingularDesignError naming the dependent columns, if any."""
    n, p = values.shape
    if n < p:
        raise InsufficientSampleError(
            f"{n} effective observations for {p} parameters"
        )
    r, piv = sla.qr(values, mode="r", pivoting=True, check_finite=False)
    diag = np.abs(np.diag(r[:p, :p])) if r.size else np.zeros(p)
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        bad = tuple(labels[j] for j in sorted(piv[rank:]))
        raise SingularDesignError(
            f"design is rank deficient (rank {rank} of {p}); "
            f"offending columns: {', '.join(bad)}",
            columns=bad,
        )


def _effective(w: np.ndarray):
    keep = w > 0
    if not np.any(keep):
        raise EmptySampleError("no observation has positive weight")
    return keep


# --------------------------------------------------------------------------
# link functions
# --------------------------------------------------------------------------

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LinkFunction:
    """A binary-model link: cdf, quantile, and likelihood terms.

    kind is "probit" or "logit". cdf and quantile are strictly monotone
    and inverse to each other; loglik_terms returns per-observation
    log-likelihood, score, and (positive) information contributions as
    functions of the linear index.
    """

    kind: str

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "probit":
            return sp.ndtr(x)
        return sp.expit(x)

    def quantile(self, q):
        q = np.asarray(q, dtype=float)
        if np.any((q <= 0) | (q >= 1)):
            raise InvalidArgumentError("link quantile needs arguments in (0, 1)")
        if self.kind == "probit":
            return sp.ndtri(q)
        return sp.logit(q)

    def log_cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "probit":
            return sp.log_ndtr(x)
        return -np.logaddexp(0.0, -x)

    def loglik_terms(self, eta: np.ndarray, t: np.ndarray):
        """Per-observation (loglik, dloglik/deta, -d2loglik/deta2)."""
        if self.kind == "probit":
            # inverse Mills ratios on both tails, computed in log space
            log_pdf = -0.5 * eta * eta - _LOG_SQRT_2PI
            m_pos = np.exp(log_pdf - sp.log_ndtr(eta))
            m_neg = np.exp(log_pdf - sp.log_ndtr(-eta))
            ll = np.where(t > 0, sp.log_ndtr(eta), sp.log_ndtr(-eta))
            score = np.where(t > 0, m_pos, -m_neg)
            info = np.where(t > 0, m_pos * (m_pos + eta), m_neg * (m_neg - eta))
            return ll, score, np.maximum(info, 0.0)
        lam = sp.expit(eta)
        ll = np.where(t > 0, -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta))
        score = t - lam
        info = lam * (1.0 - lam)
        return ll, score, info


PROBIT = LinkFunction("probit")
LOGIT = LinkFunction("logit")


def get_link(kind: str) -> LinkFunction:
    if kind == "probit":
        return PROBIT
    if kind == "logit":
        return LOGIT
    raise InvalidArgumentError(f"unknown link {kind!r}; expected probit or logit")


def std_normal_cdf(x):
    """Standard normal cdf, vectorized."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("cdf argument must be finite")
    return sp.ndtr(x)


def std_normal_quantile(q):
    """Standard normal quantile, vectorized, domain (0, 1)."""
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0.0) | (q >= 1.0)) or not np.all(np.isfinite(q)):
        raise InvalidArgumentError("quantile argument must lie strictly in (0, 1)")
    return sp.ndtri(q)


# --------------------------------------------------------------------------
# check loss and weighted quantile regression
# --------------------------------------------------------------------------


def check_loss(z, u: float):
    """Asymmetric absolute loss (u - 1{z < 0}) * z, vectorized in z."""
    _check_u(u)
    z = np.asarray(z, dtype=float)
    return (u - (z < 0.0)) * z


def _check_u(u: float) -> float:
    u = float(u)
    if not (0.0 < u < 1.0) or not math.isfinite(u):
        raise InvalidArgumentError(f"quantile index must lie in (0, 1), got {u}")
    return u


@dataclass(frozen=True)
class WqrFit:
    """Weighted quantile regression solution."""

    beta: np.ndarray
    objective: float
    iterations: int


def wqr_fit(x, y, u: float, weights=None, labels=None) -> WqrFit:
    """Minimize the weighted check loss sum over coefficient vectors.

    Zero-weight observations are dropped; the remaining rows must leave a
    full-rank design. Weight scale does not matter (the loss is positively
    homogeneous in the weights). The reported objective uses the weights
    as passed.
    """
    u = _check_u(u)
    design = _as_design(x, labels)
    y = _check_response(y, design.n)
    w = as_weight_vector(weights, design.n)
    keep = _effective(w)
    xe, ye, we = design.values[keep], y[keep], w[keep]
    _check_rank(xe * (we / we.mean())[:, None], design.labels)

    # positive homogeneity: weighted QR on (X, y) equals plain QR on the
    # row-scaled data (w*X, w*y); normalize to mean one for conditioning
    wn = we / we.mean()
    xs = xe * wn[:, None]
    ys = ye * wn

    beta, niter = _interior_point_qr(xs, ys, u)
    beta = _vertex_polish(xs, ys, u, beta)
    objective = float(np.sum(we * check_loss(ye - xe @ beta, u)))
    return WqrFit(beta=beta, objective=objective, iterations=niter)


def solve_wqr(x, y, u: float, weights=None) -> np.ndarray:
    """Coefficient vector of the weighted quantile regression."""
    return wqr_fit(x, y, u, weights).beta


def _interior_point_qr(x, y, u, tol=1e-11, max_iter=100):
    """Predictor-corrector interior point on the bounded dual LP.

    Dual: max y'a subject to X'a = (1 - u) X'1 and a in [0, 1]^n. The
    multipliers on the equality constraint are the regression
    coefficients; complementary slackness splits residuals into their
    positive and negative parts.
    """
    n, p = x.shape
    a = np.full(n, 1.0 - u)
    s = np.full(n, u)
    b0 = (1.0 - u) * x.sum(axis=0)
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    r = y - x @ beta
    eps0 = 1e-5 * (1.0 + float(np.mean(np.abs(r))))
    w = np.where(r > 0.0, r, 0.0) + eps0
    z = w - r
    niter = 0
    for niter in range(1, max_iter + 1):
        gap = z @ a + w @ s
        if gap < tol * (1.0 + abs(y @ a)):
            break
        q_inv = (a * s) / (z * s + w * a)
        rp = b0 - x.T @ a
        rr = y - x @ beta
        rd = rr - (w - z)
        try:
            cho = sla.cho_factor(x.T @ (q_inv[:, None] * x), check_finite=False)
        except np.linalg.LinAlgError:
            break
        except sla.LinAlgError:
            break

        # affine scaling predictor
        d_beta = sla.cho_solve(cho, x.T @ (q_inv * rr) - rp, check_finite=False)
        d_a = q_inv * (rr - x @ d_beta)
        d_z = -z - (z / a) * d_a
        d_w = -w + (w / s) * d_a
        ap = _step_length(a, d_a, s, -d_a)
        ad = _step_length(z, d_z, w, d_w)
        gap_aff = (z + ad * d_z) @ (a + ap * d_a) + (w + ad * d_w) @ (s - ap * d_a)
        mu = (max(gap_aff, 0.0) / gap) ** 3 * gap / (2.0 * n)

        # corrector with Mehrotra second-order terms
        gz = mu - a * z - d_a * d_z
        gw = mu - s * w + d_a * d_w
        h = rd - gw / s + gz / a
        d_beta = sla.cho_solve(cho, x.T @ (q_inv * h) - rp, check_finite=False)
        d_a = q_inv * (h - x @ d_beta)
        d_z = (gz - z * d_a) / a
        d_w = (gw + w * d_a) / s
        ap = _step_length(a, d_a, s, -d_a)
        ad = _step_length(z, d_z, w, d_w)
        if ap < 1e-14 and ad < 1e-14:
            break
        a = a + ap * d_a
        s = s - ap * d_a
        beta = beta + ad * d_beta
        z = z + ad * d_z
        w = w + ad * d_w
    return beta, niter


def _step_length(v1, d1, v2, d2):
    alpha = 1.0
    for v, d in ((v1, d1), (v2, d2)):
        neg = d < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-v[neg] / d[neg])) * _STEP_SHRINK)
    return alpha


def _vertex_polish(x, y, u, beta, scan_cap=None):
    """Snap the interior-point iterate to the best nearby basic solution.

    Picks p linearly independent rows with the smallest absolute
    residuals (stable order, so ties resolve by index) and solves the
    interpolation system. Keeps whichever of the two candidates has the
    lower objective.
    """
    n, p = x.shape
    if scan_cap is None:
        scan_cap = min(n, max(50, 8 * p))
    order = np.argsort(np.abs(y - x @ beta), kind="stable")[:scan_cap]
    basis: list[int] = []
    rows = np.empty((0, p))
    for idx in order:
        cand = np.vstack([rows, x[idx]])
        if np.linalg.matrix_rank(cand) > len(basis):
            rows = cand
            basis.append(int(idx))
        if len(basis) == p:
            break
    if len(basis) < p:
        return beta
    try:
        polished = np.linalg.solve(x[basis], y[basis])
    except np.linalg.LinAlgError:
        return beta
    obj_ip = float(np.sum(check_loss(y - x @ beta, u)))
    obj_v = float(np.sum(check_loss(y - x @ polished, u)))
    return polished if obj_v <= obj_ip else beta


# --------------------------------------------------------------------------
# binary maximum likelihood
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryMleFit:
    delta: np.ndarray
    loglik: float
    gradient_norm: float
    iterations: int


def binary_mle_fit(
    s,
    t,
    link: LinkFunction,
    weights=None,
    labels=None,
    max_iter: int = 100,
    grad_tol: float = 1e-8,
) -> BinaryMleFit:
    """Newton-Raphson fit of a weighted binary probit/logit model.

    Converges when the sup-norm of the weighted score falls below
    grad_tol. Step halving guards each Newton update. A path that
    perfectly classifies the sample while its linear index passes 30 in
    absolute value with the likelihood still improving is reported as
    separation; a merely strong signal keeps misclassified
    observations and is allowed arbitrarily large indexes.
    """
    design = _as_design(s, labels)
    t = np.asarray(t, dtype=float)
    if t.shape != (design.n,):
        raise InvalidArgumentError(
            f"outcome must have shape ({design.n},), got {t.shape}"
        )
    if not np.all((t == 0.0) | (t == 1.0)):
        raise InvalidArgumentError("outcome must be coded 0/1")
    w = as_weight_vector(weights, design.n)
    keep = _effective(w)
    se, te = design.values[keep], t[keep]
    we = w[keep] / w[keep].mean()
    if np.all(te == te[0]):
        raise DegenerateOutcomeError(
            "binary outcome takes a single value on the weighted sample"
        )
    _check_rank(se, design.labels)

    def evaluate(d):
        eta = se @ d
        ll_vec, score, info = link.loglik_terms(eta, te)
        return float(we @ ll_vec), se.T @ (we * score), info, eta

    delta = np.zeros(design.p)
    ll, grad, info, eta = evaluate(delta)
    gnorm = float(np.max(np.abs(grad)))
    niter = 0
    for niter in range(1, max_iter + 1):
        if gnorm < grad_tol:
            return BinaryMleFit(delta, ll, gnorm, niter - 1)
        hess = se.T @ ((we * info)[:, None] * se)
        try:
            step = sla.cho_solve(
                sla.cho_factor(hess, check_finite=False), grad, check_finite=False
            )
        except (np.linalg.LinAlgError, sla.LinAlgError):
            step, *_ = np.linalg.lstsq(hess, grad, rcond=None)
        accepted = improved = False
        lam = 1.0
        for _ in range(40):
            trial = delta + lam * step
            ll_t, grad_t, info_t, eta_t = evaluate(trial)
            # near the optimum the likelihood is flat at machine precision;
            # the full Newton step is still the right move for the score
            if ll_t > ll or (lam == 1.0 and ll_t >= ll - 1e-12 * (1.0 + abs(ll))):
                improved = ll_t > ll
                delta, ll, grad, info, eta = trial, ll_t, grad_t, info_t, eta_t
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        gnorm = float(np.max(np.abs(grad)))
        if (
            gnorm >= grad_tol
            and improved
            and float(np.max(np.abs(eta))) > 30.0
            and bool(np.all((eta > 0.0) == (te > 0.0)))
        ):
            raise SeparationError(
                "binary fit looks separated: the sample is perfectly "
                "classified with the likelihood still improving"
            )
    if gnorm < grad_tol:
        return BinaryMleFit(delta, ll, gnorm, niter)
    raise ConvergenceError(
        f"binary fit did not converge in {max_iter} iterations "
        f"(score sup-norm {gnorm:.3e})",
        gradient_norm=gnorm,
    )


def fit_binary_mle(s, t, link: LinkFunction, weights=None) -> np.ndarray:
    """Coefficient vector of the weighted binary probit/logit fit."""
    return binary_mle_fit(s, t, link, weights).delta


# --------------------------------------------------------------------------
# weighted least squares
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OlsFit:
    pi: np.ndarray
    sigma: float


def ols_fit(r, d, weights=None, labels=None) -> OlsFit:
    """Weighted least squares with a residual standard deviation.

    The scale uses mean-one normalized weights and divides the weighted
    residual sum of squares by (effective n - p). A zero scale is
    returned as is; callers that need a positive scale must check.
    """
    design = _as_design(r, labels)
    d = _check_response(d, design.n, name="d")
    w = as_weight_vector(weights, design.n)
    keep = _effective(w)
    re, de = design.values[keep], d[keep]
    wn = w[keep] / w[keep].mean()
    n_eff = re.shape[0]
    if n_eff <= design.p:
        raise InsufficientSampleError(
            f"need more than {design.p} effective observations for a scale, "
            f"got {n_eff}"
        )
    sw = np.sqrt(wn)
    _check_rank(re * sw[:, None], design.labels)
    pi, *_ = np.linalg.lstsq(re * sw[:, None], de * sw, rcond=None)
    resid = de - re @ pi
    sigma = math.sqrt(float(wn @ (resid * resid)) / (n_eff - design.p))
    return OlsFit(pi=pi, sigma=sigma)


# --------------------------------------------------------------------------
# percentiles
# --------------------------------------------------------------------------


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank (inclusive) percentile: smallest v with at least
    ceil(q/100 * m) observations <= v. q = 0 returns the minimum.

    The rank is computed in exact rational arithmetic so grid percents
    like 10 or 2.5 never round across an integer boundary.
    """
    from fractions import Fraction

    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise InvalidArgumentError("percentile needs a nonempty 1-d array")
    if not (0.0 <= q <= 100.0):
        raise InvalidArgumentError(f"percent must lie in [0, 100], got {q}")
    m = values.size
    rank = math.ceil(Fraction(str(float(q))) * m / 100)
    rank = min(max(rank, 1), m)
    return float(np.sort(values, kind="stable")[rank - 1])
