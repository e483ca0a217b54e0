"""Tweedie (compound Poisson-gamma, 1 < p < 2) loss and simulation."""
from __future__ import annotations

import numpy as np


def _check_power(p):
    if not 1.0 < p < 2.0:
        raise ValueError(f"tweedie power must lie in (1, 2), got {p}")


def tweedie_deviance(y, mu, p: float = 1.5):
    """Unit deviance; the y = 0 term y^(2-p)/((1-p)(2-p)) is taken as 0."""
    _check_power(p)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        raise ValueError("mu must be positive")
    first = np.where(y > 0, np.power(np.maximum(y, 0), 2 - p) / ((1 - p) * (2 - p)), 0.0)
    return 2.0 * (first - y * np.power(mu, 1 - p) / (1 - p) + np.power(mu, 2 - p) / (2 - p))


def tweedie_loss(y, score, p: float = 1.5):
    """Negative log-likelihood kernel in the log-link score F (mu = e^F)."""
    _check_power(p)
    y = np.asarray(y, dtype=float)
    return -y * np.exp((1 - p) * score) / (1 - p) + np.exp((2 - p) * score) / (2 - p)


def tweedie_grad_hess(y, score, p: float = 1.5):
    """First and second derivatives of :func:`tweedie_loss` in the score."""
    _check_power(p)
    y = np.asarray(y, dtype=float)
    a = np.exp((1 - p) * score)
    b = np.exp((2 - p) * score)
    return -y * a + b, -(1 - p) * y * a + (2 - p) * b


def simulate_tweedie(mu, phi: float, p: float, n_draws: int, seed=None):
    """Compound Poisson-gamma draws with mean ``mu`` and variance ``phi mu^p``.

    ``mu`` may be an array; the result has shape ``(n_draws,) + mu.shape``.
    The number of gamma jumps is Poisson(mu^(2-p) / (phi (2-p))); each jump is
    Gamma(shape (2-p)/(p-1), scale phi (p-1) mu^(p-1)). A sum of N such jumps
    is drawn directly as Gamma(N * shape, scale).
    """
    _check_power(p)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("mu must be non-negative")
    size = (n_draws,) + mu.shape
    if phi == 0:
        return np.broadcast_to(mu, size).copy()
    if phi < 0:
        raise ValueError("phi must be non-negative")
    rate = np.power(mu, 2 - p) / (phi * (2 - p))
    shape = (2 - p) / (p - 1)
    scale = phi * (p - 1) * np.power(mu, p - 1)
    n = rng.poisson(np.broadcast_to(rate, size))
    out = np.zeros(size)
    pos = n > 0
    out[pos] = rng.gamma(n[pos] * shape, np.broadcast_to(scale, size)[pos])
    return out


def estimate_dispersion(y, mu, p: float, n_params: int = 0) -> float:
    """Pearson estimate of phi: sum (y - mu)^2 / mu^p over residual dof."""
    y = np.asarray(y, dtype=float)
    mu = np.maximum(np.asarray(mu, dtype=float), 1e-8)
    dof = max(y.size - n_params, 1)
    return float(np.sum((y - mu) ** 2 / np.power(mu, p)) / dof)
