"""Constant-rate baselines.

Both baselines predict one monthly rate per study-site and repeat it across
the site's months. The historical-rate baseline reads the facility's mean
rate within the indication off the feature matrix, walking the imputation
ladder when the facility has no such history.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import DataError
from ..features import BASELINE_LADDER, FeatureMatrix, ImputationLadder

logger = logging.getLogger(__name__)


def site_rates(keys: pd.DataFrame, y) -> pd.DataFrame:
    """Per study-site total, month count and rate (total / months)."""
    df = keys[["study_id", "facility_id"]].assign(y=np.asarray(y, dtype=np.float64))
    g = df.groupby(["study_id", "facility_id"], sort=True)["y"]
    out = pd.DataFrame({"total": g.sum(), "n_months": g.size()}).reset_index()
    out["rate"] = out["total"] / out["n_months"]
    return out


@dataclass
class HistRateModel:
    global_rate: float
    ladder: ImputationLadder = BASELINE_LADDER
    family: str = "hist_rate"

    def predict(self, matrix: FeatureMatrix) -> np.ndarray:
        missing = [r for r in self.ladder.rungs if r not in matrix.meta]
        if missing:
            raise DataError(f"historical-rate baseline needs column(s) {missing}")
        out = np.full(len(matrix), np.nan)
        for r in self.ladder.rungs:
            v = matrix.data[r].to_numpy(np.float64)
            fill = np.isnan(out) & ~np.isnan(v)
            out[fill] = v[fill]
        n_fallback = int(np.isnan(out).sum())
        if n_fallback:
            logger.info("historical-rate baseline: %d rows fall back to the global mean %.4g",
                        n_fallback, self.global_rate)
        return np.where(np.isnan(out), self.global_rate, out)

    def to_dict(self) -> dict:
        return {"family": self.family, "global_rate": self.global_rate,
                "ladder": list(self.ladder.rungs)}

    @classmethod
    def from_dict(cls, d: dict) -> "HistRateModel":
        return cls(float(d["global_rate"]), ImputationLadder(tuple(d["ladder"])))


def fit_baseline_hist_rate(keys: pd.DataFrame, y, ladder: ImputationLadder = BASELINE_LADDER
                           ) -> HistRateModel:
    """The only fitted quantity is the global fallback: the mean rate over the
    training study-sites."""
    rates = site_rates(keys, y)
    if rates.empty:
        raise DataError("no training study-sites for the historical-rate baseline")
    return HistRateModel(float(rates["rate"].mean()), ladder)
