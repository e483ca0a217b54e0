"""Zero-inflated Poisson and hurdle regressions.

Both models have a logit-linked zero part and a log-linked count part. The
ZIP is fitted by EM, whose M-step splits into a weighted logistic regression
(soft labels = structural-zero responsibilities) and a weighted Poisson
regression. Hurdle parts are fitted independently: logistic on the zero
indicator, then a zero-truncated Poisson or negative binomial on the
positive rows.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, expit, gammaln, log_expit

from ..errors import DataError
from .distributions import CountParams, count_logpmf, count_mean

logger = logging.getLogger(__name__)

MU_FLOOR = 1e-8
ETA_MIN = float(np.log(MU_FLOOR))
ETA_MAX = 20.0
LOGIT_CLAMP = 30.0
SEPARATION_RIDGE = 1e-2
R_MAX = 1e6

HURDLE_FAMILIES = {"poisson": "poisson", "truncated_poisson": "poisson",
                   "negative_binomial": "negative_binomial"}


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if np.isnan(X).any():
        raise DataError("GLM design matrix contains missing values; run GLM preprocessing first")
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _penalty(p: int, ridge: float) -> np.ndarray:
    pen = np.full(p, ridge)
    pen[0] = 0.0  # intercept unpenalised
    return pen


def _solve(H, g):
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


# ---------------------------------------------------------------------------
# sub-problem solvers
# ---------------------------------------------------------------------------

def _logistic_ll(X, t, w, beta, pen):
    eta = np.clip(X @ beta, -LOGIT_CLAMP, LOGIT_CLAMP)
    ll = np.sum(w * (t * log_expit(eta) + (1 - t) * log_expit(-eta)))
    return ll - 0.5 * np.sum(pen * beta**2)


def fit_logistic(X, t, w=None, beta0=None, ridge=0.0, tol=1e-8, max_iter=100):
    """Weighted logistic regression with soft labels ``t`` in [0, 1].

    Newton with step halving; linear predictors are clamped to +-30 so a
    separable problem ends at a finite, flagged estimate. Returns
    (beta, converged, separated).
    """
    n, p = X.shape
    w = np.ones(n) if w is None else w
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    pen = _penalty(p, ridge)
    ll = _logistic_ll(X, t, w, beta, pen)
    converged = False
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -LOGIT_CLAMP, LOGIT_CLAMP)
        pr = expit(eta)
        g = X.T @ (w * (t - pr)) - pen * beta
        H = (X * (w * pr * (1 - pr))[:, None]).T @ X + np.diag(pen + 1e-12)
        step = _solve(H, g)
        if 0.5 * (g @ step) < tol * n:  # Newton decrement per observation
            converged = True
            break
        s = 1.0
        while True:
            cand = beta + s * step
            ll_new = _logistic_ll(X, t, w, cand, pen)
            if ll_new >= ll - 1e-12 * abs(ll) or s < 1e-10:
                break
            s *= 0.5
        if ll_new < ll:
            converged = True
            break
        beta, ll = cand, ll_new
    separated = bool(np.max(np.abs(X @ beta)) >= LOGIT_CLAMP - 1e-9)
    return beta, converged, separated


def _poisson_ll(X, y, w, beta, offset):
    eta = np.clip(X @ beta + offset, ETA_MIN, ETA_MAX)
    return np.sum(w * (y * eta - np.exp(eta)))


def fit_poisson(X, y, w=None, beta0=None, offset=None, tol=1e-8, max_iter=100):
    """Weighted Poisson regression (log link) by Newton with backtracking."""
    n, p = X.shape
    w = np.ones(n) if w is None else w
    offset = np.zeros(n) if offset is None else offset
    if beta0 is None:
        beta = np.zeros(p)
        beta[0] = np.log(max(np.average(y, weights=w) if w.sum() > 0 else 1.0, MU_FLOOR))
    else:
        beta = beta0.copy()
    ll = _poisson_ll(X, y, w, beta, offset)
    converged = False
    for _ in range(max_iter):
        mu = np.exp(np.clip(X @ beta + offset, ETA_MIN, ETA_MAX))
        g = X.T @ (w * (y - mu))
        H = (X * (w * mu)[:, None]).T @ X + 1e-10 * np.eye(p)
        step = _solve(H, g)
        if 0.5 * (g @ step) < tol * n:  # Newton decrement per observation
            converged = True
            break
        s = 1.0
        while True:
            cand = beta + s * step
            ll_new = _poisson_ll(X, y, w, cand, offset)
            if ll_new >= ll or s < 1e-10:
                break
            s *= 0.5
        if ll_new < ll:
            converged = True
            break
        beta, ll = cand, ll_new
    return beta, converged


def _truncated_poisson_ll(X, y, beta, offset):
    eta = np.clip(X @ beta + offset, ETA_MIN, ETA_MAX)
    lam = np.exp(eta)
    return np.sum(y * eta - lam - np.log(-np.expm1(-lam)) - gammaln(y + 1))


def fit_truncated_poisson(X, y, offset=None, tol=1e-8, max_iter=100):
    """Zero-truncated Poisson regression on positive counts (Newton)."""
    n, p = X.shape
    offset = np.zeros(n) if offset is None else offset
    beta = np.zeros(p)
    beta[0] = np.log(max(y.mean() - 1.0, 0.1))
    ll = _truncated_poisson_ll(X, y, beta, offset)
    converged = False
    for _ in range(max_iter):
        lam = np.exp(np.clip(X @ beta + offset, ETA_MIN, ETA_MAX))
        m = lam / -np.expm1(-lam)
        g = X.T @ (y - m)
        v = np.maximum(m * (1.0 + lam - m), 1e-12)  # Var of the truncated law
        H = (X * v[:, None]).T @ X + 1e-10 * np.eye(p)
        step = _solve(H, g)
        if 0.5 * (g @ step) < tol * n:  # Newton decrement per observation
            converged = True
            break
        s = 1.0
        while True:
            cand = beta + s * step
            ll_new = _truncated_poisson_ll(X, y, cand, offset)
            if ll_new >= ll or s < 1e-10:
                break
            s *= 0.5
        if ll_new < ll:
            converged = True
            break
        beta, ll = cand, ll_new
    return beta, converged, ll


def truncated_nb_negll(theta, X, y, offset):
    """Negative log-likelihood and gradient of the zero-truncated NB in
    theta = (beta, log r)."""
    beta, log_r = theta[:-1], theta[-1]
    r = np.exp(log_r)
    eta = np.clip(X @ beta + offset, ETA_MIN, ETA_MAX)
    mu = np.exp(eta)
    log_p0 = r * (np.log(r) - np.log(r + mu))
    p0 = np.exp(log_p0)
    log_nz = np.log(-np.expm1(log_p0))
    ll = (gammaln(y + r) - gammaln(r) - gammaln(y + 1) + log_p0
          + y * (eta - np.log(r + mu)) - log_nz)
    odds0 = p0 / -np.expm1(log_p0)
    d_eta = r * (y - mu) / (r + mu) - odds0 * r * mu / (r + mu)
    dlogp0_dr = np.log(r) - np.log(r + mu) + mu / (r + mu)
    d_r = (digamma(y + r) - digamma(r) + dlogp0_dr - y / (r + mu)
           + odds0 * dlogp0_dr)
    grad = np.concatenate([X.T @ d_eta, [np.sum(d_r) * r]])
    return -np.sum(ll), -grad


def fit_truncated_nb(X, y, offset=None, beta0=None):
    """Zero-truncated NB regression by L-BFGS. Returns (beta, r, converged, ll)."""
    n, p = X.shape
    offset = np.zeros(n) if offset is None else offset
    if beta0 is None:
        beta0 = np.zeros(p)
        beta0[0] = np.log(max(y.mean() - 1.0, 0.1))
    theta0 = np.concatenate([beta0, [0.0]])
    res = minimize(truncated_nb_negll, theta0, args=(X, y, offset), jac=True,
                   method="L-BFGS-B", options={"maxiter": 1000, "gtol": 1e-8})
    return res.x[:-1], float(np.exp(res.x[-1])), bool(res.success), -float(res.fun)


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------

@dataclass
class GLMModel:
    """Two-part count regression. ``zero_coef``/``count_coef`` include the
    intercept as their first entry."""

    family: str  # "zip" or "hurdle"
    zero_coef: np.ndarray
    count_coef: np.ndarray
    count_family: str = "poisson"
    r: float | None = None
    feature_names: list[str] = field(default_factory=list)
    schema_hash: str = ""
    loglik: float = float("nan")
    iterations: int = 0
    converged: bool = True
    flags: list[str] = field(default_factory=list)
    loglik_trace: list[float] = field(default_factory=list)

    def count_params(self, X, offset=None) -> CountParams:
        D = _design(X)
        off = 0.0 if offset is None else offset
        pi = expit(np.clip(D @ self.zero_coef, -LOGIT_CLAMP, LOGIT_CLAMP))
        lam = np.exp(np.clip(D @ self.count_coef + off, ETA_MIN, ETA_MAX))
        fam = "zip" if self.family == "zip" else "hurdle"
        r = self.r if (fam == "hurdle" and self.count_family == "negative_binomial") else None
        return CountParams(fam, lam, pi, r)

    def predict(self, X, offset=None) -> np.ndarray:
        return np.asarray(count_mean(self.count_params(X, offset)), dtype=np.float64)

    def log_likelihood(self, X, y, offset=None) -> float:
        return float(np.sum(count_logpmf(self.count_params(X, offset), np.asarray(y))))

    def to_dict(self) -> dict:
        return {
            "family": self.family, "count_family": self.count_family,
            "zero_coef": [float(v) for v in self.zero_coef],
            "count_coef": [float(v) for v in self.count_coef],
            "r": self.r, "feature_names": list(self.feature_names),
            "schema_hash": self.schema_hash, "loglik": self.loglik,
            "iterations": self.iterations, "converged": self.converged,
            "flags": list(self.flags), "loglik_trace": [float(v) for v in self.loglik_trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GLMModel":
        return cls(d["family"], np.asarray(d["zero_coef"], float), np.asarray(d["count_coef"], float),
                   d["count_family"], d["r"], list(d["feature_names"]), d["schema_hash"],
                   d["loglik"], d["iterations"], d["converged"], list(d["flags"]),
                   list(d["loglik_trace"]))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _zip_loglik(D, y, bz, bc, offset):
    pi_eta = np.clip(D @ bz, -LOGIT_CLAMP, LOGIT_CLAMP)
    lam = np.exp(np.clip(D @ bc + offset, ETA_MIN, ETA_MAX))
    log_pi, log_1mpi = log_expit(pi_eta), log_expit(-pi_eta)
    zero = np.logaddexp(log_pi, log_1mpi - lam)
    pos = log_1mpi + y * np.log(lam) - lam - gammaln(y + 1)
    return float(np.sum(np.where(y == 0, zero, pos)))


def _subsample(n, fraction, seed):
    if fraction >= 1.0:
        return slice(None)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=max(1, int(round(fraction * n))), replace=False))


def _em_step(D, y, offset, bz, bc, ridge):
    """One EM update of (zero part, count part)."""
    pi = expit(np.clip(D @ bz, -LOGIT_CLAMP, LOGIT_CLAMP))
    lam = np.exp(np.clip(D @ bc + offset, ETA_MIN, ETA_MAX))
    zero = y == 0
    z = np.zeros(len(y))
    z[zero] = pi[zero] / (pi[zero] + (1 - pi[zero]) * np.exp(-lam[zero]))
    bz_new, _, separated = fit_logistic(D, z, beta0=bz, ridge=ridge, max_iter=25)
    bc_new, _ = fit_poisson(D, y, w=1 - z, beta0=bc, offset=offset, max_iter=25)
    return bz_new, bc_new, separated


def fit_zip(X, y, tol: float = 1e-6, max_iter: int = 200, offset=None,
            subsample: float = 1.0, seed: int = 0, feature_names=None,
            schema_hash: str = "", accelerate: bool = True) -> GLMModel:
    """ZIP regression by EM.

    With ``accelerate`` each iteration is a SQUAREM cycle: two EM updates,
    a squared extrapolation, and a stabilising EM update from the
    extrapolated point, falling back to the plain EM iterate whenever the
    extrapolation does not improve the likelihood. Every accepted iterate
    therefore has a log-likelihood at least that of an EM step.

    Stops when the log-likelihood gain per observation drops below ``tol``
    or after ``max_iter`` iterations; non-convergence is flagged.
    """
    y = np.asarray(y, dtype=np.float64)
    D = _design(X)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DataError("ZIP targets must be non-negative integers")
    rows = _subsample(len(y), subsample, seed)
    D, y = D[rows], y[rows]
    offset = np.zeros(len(y)) if offset is None else np.asarray(offset, float)[rows]
    n, p = D.shape
    flags: list[str] = []

    bc, _ = fit_poisson(D, y, offset=offset)
    lam0 = np.exp(np.clip(D @ bc + offset, ETA_MIN, ETA_MAX))
    excess = np.clip(np.mean(y == 0) - np.mean(np.exp(-lam0)), 0.05, 0.95)
    bz = np.zeros(p)
    bz[0] = np.log(excess / (1 - excess))
    ll = _zip_loglik(D, y, bz, bc, offset)
    trace = [ll]
    ridge = 0.0
    converged = False
    it = 0

    def step(bz, bc):
        nonlocal ridge
        bz1, bc1, separated = _em_step(D, y, offset, bz, bc, ridge)
        if separated and p > 1 and ridge == 0.0:
            ridge = SEPARATION_RIDGE
            flags.append("separation_ridge")
            logger.warning("ZIP zero part separable: refitting with ridge %g", ridge)
            bz1, bc1, _ = _em_step(D, y, offset, bz, bc, ridge)
        return bz1, bc1

    for it in range(1, max_iter + 1):
        bz1, bc1 = step(bz, bc)
        cand_z, cand_c = bz1, bc1
        if accelerate:
            bz2, bc2 = step(bz1, bc1)
            cand_z, cand_c = bz2, bc2
            ll2 = _zip_loglik(D, y, bz2, bc2, offset)
            t0, t1, t2 = (np.concatenate(v) for v in ((bz, bc), (bz1, bc1), (bz2, bc2)))
            r, v = t1 - t0, t2 - 2 * t1 + t0
            if np.linalg.norm(v) > 0:
                alpha = min(-np.linalg.norm(r) / np.linalg.norm(v), -1.0)
                t_ex = t0 - 2 * alpha * r + alpha**2 * v
                if np.all(np.isfinite(t_ex)):
                    ez, ec = step(t_ex[:p], t_ex[p:])
                    if _zip_loglik(D, y, ez, ec, offset) > ll2:
                        cand_z, cand_c = ez, ec
        ll_new = _zip_loglik(D, y, cand_z, cand_c, offset)
        if ll_new < ll:
            # numerical noise at the optimum: keep the best iterate
            converged = (ll - ll_new) <= 1e-9 * abs(ll)
            break
        bz, bc = cand_z, cand_c
        gain, ll = ll_new - ll, ll_new
        trace.append(ll)
        if gain / n < tol:
            converged = True
            break
    if not converged:
        flags.append("not_converged")
        logger.warning("ZIP EM stopped after %d iterations without converging", it)
    if np.max(np.abs(D @ bz)) >= LOGIT_CLAMP - 1e-9:
        flags.append("zero_part_clamped")
    return GLMModel("zip", bz, bc, "poisson", None, list(feature_names or []), schema_hash,
                    ll, it, converged, flags, trace)


def fit_hurdle(X, y, count_family: str = "poisson", offset=None, feature_names=None,
               schema_hash: str = "") -> GLMModel:
    """Two-part hurdle regression.

    ``count_family`` is "poisson" (a synonym for "truncated_poisson": the
    positive part is always zero-truncated) or "negative_binomial".
    """
    if count_family not in HURDLE_FAMILIES:
        raise ValueError(f"unknown hurdle count family {count_family!r}")
    fam = HURDLE_FAMILIES[count_family]
    y = np.asarray(y, dtype=np.float64)
    D = _design(X)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DataError("hurdle targets must be non-negative integers")
    pos = y > 0
    if not pos.any():
        raise DataError("hurdle count part undefined: no positive targets")
    offset = np.zeros(len(y)) if offset is None else np.asarray(offset, float)
    flags: list[str] = []

    bz, conv_z, separated = fit_logistic(D, (~pos).astype(float))
    if separated and D.shape[1] > 1:
        flags.append("separation_ridge")
        bz, conv_z, _ = fit_logistic(D, (~pos).astype(float), ridge=SEPARATION_RIDGE)
    if np.max(np.abs(D @ bz)) >= LOGIT_CLAMP - 1e-9:
        flags.append("zero_part_clamped")

    Dp, yp, op = D[pos], y[pos], offset[pos]
    r = None
    bc, conv_c, ll_c = fit_truncated_poisson(Dp, yp, op)
    if fam == "negative_binomial":
        bnb, r_hat, conv_nb, ll_nb = fit_truncated_nb(Dp, yp, op, beta0=bc)
        if not np.isfinite(r_hat) or r_hat > R_MAX or not np.all(np.isfinite(bnb)):
            flags.append("nb_poisson_fallback")
            logger.warning("hurdle NB size overflowed (r=%g): using truncated Poisson", r_hat)
            fam = "poisson"
        else:
            bc, r, conv_c = bnb, r_hat, conv_nb
    model = GLMModel("hurdle", bz, bc, fam, r, list(feature_names or []), schema_hash,
                     converged=bool(conv_z and conv_c), flags=flags)
    model.loglik = model.log_likelihood(X, y, offset)
    model.loglik_trace = [model.loglik]
    model.iterations = 1
    return model
