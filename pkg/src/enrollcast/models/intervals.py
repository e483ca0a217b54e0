"""Prediction intervals for cumulative study enrollment.

Two routes: Monte-Carlo simulation of tweedie site-month draws around the
point forecast, and a pair of pinball-loss GBTs giving regression quantiles.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import ConfigError
from ..trialdata import MILESTONE_FRACTIONS, milestone_threshold
from .forecast import ForecastSeries
from .gbt import GBTParams, PinballLoss, fit_gbt
from .tweedie import simulate_tweedie

MIN_SIMS = 100


@dataclass
class IntervalBands:
    """``bands``: study_id, study_month, level, lower, upper, mean (cumulative).
    ``totals``: the same at each study's final month. ``milestones``:
    study_id, milestone, level, lower, upper in study months (inf when a
    quantile of simulated trajectories never reaches the milestone)."""

    bands: pd.DataFrame
    totals: pd.DataFrame
    milestones: pd.DataFrame


def _check_levels(levels) -> tuple[float, ...]:
    levels = tuple(float(l) for l in levels)
    if not levels or any(not 0.0 < l < 1.0 for l in levels):
        raise ConfigError("intervals.levels: every level must lie in (0, 1)")
    return levels


def _first_reach(cum: np.ndarray, threshold: float) -> np.ndarray:
    """First 1-based month per simulated row with cum >= threshold, inf if never."""
    reached = cum >= threshold
    first = np.argmax(reached, axis=1).astype(np.float64) + 1
    first[~reached.any(axis=1)] = np.inf
    return first


def _study_stream(seed: int, study_id) -> np.random.SeedSequence:
    key = int.from_bytes(hashlib.sha256(str(study_id).encode()).digest()[:8], "little")
    return np.random.SeedSequence([int(seed), key])


def prediction_intervals(forecast: ForecastSeries, phi: float, p: float = 1.5,
                         n_sims: int = 1000, levels=(0.5, 0.8, 0.9),
                         dispersion_scale: float = 1.0, seed: int = 0) -> IntervalBands:
    """Simulate ``n_sims`` trajectories per study from independent tweedie
    site-month draws with dispersion ``phi * dispersion_scale``.

    Each study draws from its own stream keyed by ``seed`` and a hash of its
    study id, so results do not depend on which other studies are present.
    """
    if n_sims < MIN_SIMS:
        raise ConfigError(f"intervals.n_sims: {n_sims} < {MIN_SIMS}; quantiles would be unstable")
    if phi < 0 or dispersion_scale < 0:
        raise ConfigError("intervals.dispersion_scale: dispersion must be non-negative")
    levels = _check_levels(levels)
    site = forecast.site
    study_ids = sorted(site["study_id"].unique())
    targets = forecast.milestones.set_index("study_id")["target"]
    streams = [_study_stream(seed, sid) for sid in study_ids]
    phi_eff = phi * dispersion_scale
    band_rows, total_rows, ms_rows = [], [], []
    for sid, ss in zip(study_ids, streams):
        g = site[site["study_id"] == sid]
        months = g["study_month"].to_numpy(np.int64)
        n_months = int(months.max())
        mu = g["pred_mean"].to_numpy(np.float64)
        draws = simulate_tweedie(mu, phi_eff, p, n_sims, np.random.default_rng(ss))
        monthly = np.zeros((n_sims, n_months))
        for j in range(n_months):
            sel = months == j + 1
            if sel.any():
                monthly[:, j] = draws[:, sel].sum(axis=1)
        cum = np.cumsum(monthly, axis=1)
        mean_cum = np.cumsum(np.bincount(months - 1, weights=mu, minlength=n_months))
        for lv in levels:
            lo, hi = np.quantile(cum, [(1 - lv) / 2, (1 + lv) / 2], axis=0)
            band_rows.append(pd.DataFrame({"study_id": sid, "study_month": np.arange(1, n_months + 1),
                                           "level": lv, "lower": lo, "upper": hi, "mean": mean_cum}))
            total_rows.append({"study_id": sid, "level": lv, "lower": lo[-1], "upper": hi[-1],
                               "mean": mean_cum[-1]})
            if sid in targets.index:
                for name, frac in MILESTONE_FRACTIONS.items():
                    t = _first_reach(cum, milestone_threshold(int(targets[sid]), frac))
                    qlo, qhi = np.quantile(t, [(1 - lv) / 2, (1 + lv) / 2], method="inverted_cdf")
                    ms_rows.append({"study_id": sid, "milestone": name, "level": lv,
                                    "lower": qlo, "upper": qhi})
    bands = pd.concat(band_rows, ignore_index=True) if band_rows else pd.DataFrame()
    return IntervalBands(bands, pd.DataFrame(total_rows), pd.DataFrame(ms_rows))


def fit_quantile_pair(X, y, tau: float = 0.1, params: GBTParams | None = None):
    """Pinball GBTs at ``tau`` and ``1 - tau``."""
    if not 0.0 < tau < 0.5:
        raise ConfigError("intervals.tau: must lie in (0, 0.5)")
    params = params or GBTParams()
    return (fit_gbt(X, y, PinballLoss(tau), params), fit_gbt(X, y, PinballLoss(1 - tau), params))


def quantile_bands(lower_model, upper_model, X, forecast: ForecastSeries) -> pd.DataFrame:
    """Cumulative bands from summed site-month regression quantiles.

    ``X`` rows align with ``forecast.site``. Summing quantiles gives bands
    that are conservative for the study total, not exact quantiles of it.
    """
    site = forecast.site.assign(
        lower=np.maximum(lower_model.predict(X), 0.0),
        upper=np.maximum(upper_model.predict(X), 0.0))
    site["upper"] = np.maximum(site["upper"], site["lower"])
    out = site.groupby(["study_id", "study_month"], sort=True)[["lower", "upper", "pred_mean"]].sum()
    out = out.groupby(level="study_id").cumsum().reset_index()
    return out.rename(columns={"pred_mean": "mean"})
