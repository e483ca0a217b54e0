"""Count distributions for zero-heavy monthly enrollment.

All functions accept scalars or broadcastable arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

FAMILIES = ("poisson", "truncated_poisson", "negative_binomial", "zip", "hurdle")


@dataclass(frozen=True)
class CountParams:
    """Parameters of one count law.

    ``lam`` is the Poisson mean (or NB mean), ``pi`` the zero mass (ZIP
    mixing weight or hurdle zero probability) and ``r`` the NB size. A hurdle
    with ``r`` set uses a zero-truncated NB count part, otherwise a
    zero-truncated Poisson.
    """

    family: str
    lam: float
    pi: float = 0.0
    r: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        lam, pi = np.asarray(self.lam), np.asarray(self.pi)
        if np.any(~(lam > 0)):
            raise ValueError("lam must be > 0")
        if np.any((pi < 0) | (pi > 1)):
            raise ValueError("pi must lie in [0, 1]")
        if self.r is not None and np.any(~(np.asarray(self.r) > 0)):
            raise ValueError("r must be > 0")
        if self.family == "negative_binomial" and self.r is None:
            raise ValueError("negative_binomial needs r")


def poisson_logpmf(k, lam):
    k = np.asarray(k, dtype=float)
    return xlogy(k, lam) - lam - gammaln(k + 1)


def nbinom_logpmf(k, mu, r):
    """NB with mean ``mu`` and size ``r`` (variance mu + mu^2/r)."""
    k = np.asarray(k, dtype=float)
    return (gammaln(k + r) - gammaln(r) - gammaln(k + 1)
            + r * (np.log(r) - np.log(r + mu)) + xlogy(k, mu) - k * np.log(r + mu))


def log_poisson_nonzero(lam):
    """log(1 - exp(-lam)), accurate for small lam."""
    return np.log(-np.expm1(-np.asarray(lam, dtype=float)))


def log_nbinom_nonzero(mu, r):
    log_p0 = r * (np.log(r) - np.log(r + mu))
    return np.log(-np.expm1(log_p0))


def truncated_poisson_mean(lam):
    lam = np.asarray(lam, dtype=float)
    return lam / -np.expm1(-lam)


def truncated_nbinom_mean(mu, r):
    return mu / np.exp(log_nbinom_nonzero(mu, r))


def _truncated_count_logpmf(k, lam, r):
    if r is None:
        return poisson_logpmf(k, lam) - log_poisson_nonzero(lam)
    return nbinom_logpmf(k, lam, r) - log_nbinom_nonzero(lam, r)


def count_logpmf(params: CountParams, k):
    """Log probability of ``k`` under ``params``.

    Raises ``ValueError`` for negative ``k`` or ``k = 0`` under the
    zero-truncated Poisson.
    """
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise ValueError("k must be a non-negative integer")
    lam, pi, r, fam = params.lam, params.pi, params.r, params.family
    if fam == "poisson":
        return poisson_logpmf(k, lam)
    if fam == "negative_binomial":
        return nbinom_logpmf(k, lam, r)
    if fam == "truncated_poisson":
        if np.any(k < 1):
            raise ValueError("truncated Poisson has support k >= 1")
        return _truncated_count_logpmf(k, lam, None)
    if fam == "zip":
        with np.errstate(divide="ignore"):
            log_pos = np.log1p(-pi) + poisson_logpmf(k, lam)
            log_zero = np.logaddexp(np.log(pi), np.log1p(-pi) - lam)
        return np.where(k == 0, log_zero, log_pos)
    # hurdle
    with np.errstate(divide="ignore", invalid="ignore"):
        log_pos = np.log1p(-pi) + _truncated_count_logpmf(np.maximum(k, 1), lam, r)
        return np.where(k == 0, np.log(pi), log_pos)


def count_pmf(params: CountParams, k):
    return np.exp(count_logpmf(params, k))


def count_mean(params: CountParams):
    lam, pi, r, fam = params.lam, params.pi, params.r, params.family
    if fam in ("poisson", "negative_binomial"):
        return lam
    if fam == "truncated_poisson":
        return truncated_poisson_mean(lam)
    if fam == "zip":
        return (1 - pi) * lam
    tmean = truncated_poisson_mean(lam) if r is None else truncated_nbinom_mean(lam, r)
    return (1 - pi) * tmean


def tail_bound(params: CountParams, eps: float = 1e-12) -> int:
    """An upper index K with P(X > K) < eps, from a Chernoff-style bound.

    For Poisson(lam), P(X >= K) <= exp(-lam) (e lam / K)^K for K > lam. NB
    tails are bounded by a geometric envelope on successive pmf ratios.
    """
    lam = float(np.max(params.lam))
    if params.r is None or params.family in ("poisson", "truncated_poisson", "zip"):
        k = max(int(np.ceil(np.e * lam)) + 1, 1)
        while -lam + k * (1 + np.log(lam) - np.log(k)) > np.log(eps):
            k += 1
        return k
    r = float(params.r)
    q = lam / (r + lam)
    k = int(np.ceil(lam + 10 * np.sqrt(lam + lam**2 / r))) + 1
    while True:
        # successive pmf ratios are q (k + r) / (k + 1): non-increasing in k
        # when r >= 1, and bounded by q when r < 1
        ratio = q * (k + r) / (k + 1) if r >= 1 else q
        if ratio < 1:
            logp = nbinom_logpmf(k, lam, r) - np.log1p(-ratio)
            if logp < np.log(eps):
                return k
        k += max(1, k // 10)
