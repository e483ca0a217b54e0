"""Aggregate site-month predictions into study timelines.

Study months are numbered from 1 at the calendar month of the study's
earliest site creation. Milestones are the first study month whose
cumulative prediction reaches ceil(f * target) for f in 0.5, 0.9, 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..errors import DataError
from ..trialdata import (MILESTONE_FRACTIONS, Cohort, SiteMonthPanel, build_site_month_panel,
                         expand_site_months, milestone_threshold, month_ordinal)

logger = logging.getLogger(__name__)

MAX_FORECAST_MONTHS = 120
MODES = ("evaluation", "planning")


@dataclass
class ForecastSeries:
    """``site``: study_id, facility_id, country, month_index, study_month,
    pred_mean. ``study``: study_id, study_month, pred_mean, cumulative.
    ``country``: study_id, country, study_month, pred_mean. ``milestones``:
    study_id, target, pe50, pe90, last (study months, NaN when unreached)."""

    site: pd.DataFrame
    study: pd.DataFrame
    country: pd.DataFrame
    milestones: pd.DataFrame
    capped: list[str] = field(default_factory=list)

    def study_totals(self) -> pd.Series:
        return self.site.groupby("study_id")["pred_mean"].sum()

    def forecast_frame(self) -> pd.DataFrame:
        """Rows of ``forecast.csv``."""
        return self.site[["study_id", "facility_id", "month_index", "pred_mean"]]


def study_start_ordinals(cohort: Cohort) -> pd.Series:
    s = cohort.sites
    return pd.Series(month_ordinal(s["creation_date"]), index=s.index).groupby(s["study_id"]).min()


def first_month_reaching(cumulative: np.ndarray, threshold: float) -> float:
    hit = np.flatnonzero(cumulative >= threshold * (1 - 1e-12))
    return float(hit[0] + 1) if hit.size else np.nan


def _milestones(study: pd.DataFrame, targets: pd.Series) -> pd.DataFrame:
    rows = []
    for sid, g in study.groupby("study_id", sort=True):
        cum = g["cumulative"].to_numpy()
        months = g["study_month"].to_numpy()
        target = int(targets[sid])
        row = {"study_id": sid, "target": target}
        for name, frac in MILESTONE_FRACTIONS.items():
            idx = first_month_reaching(cum, milestone_threshold(target, frac))
            row[name] = np.nan if np.isnan(idx) else float(months[int(idx) - 1])
        rows.append(row)
    return pd.DataFrame(rows, columns=["study_id", "target", *MILESTONE_FRACTIONS])


def build_forecast(keys: pd.DataFrame, pred, cohort: Cohort) -> ForecastSeries:
    """Aggregate per-row predictions (aligned with ``keys``) to site, country
    and study series. Every aggregate is a plain sum of its site-months."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[0] != len(keys):
        raise DataError("predictions and keys differ in length")
    if np.any(pred < 0) or np.any(~np.isfinite(pred)):
        raise DataError("predicted means must be finite and non-negative")
    sites = cohort.sites[["study_id", "facility_id", "country", "creation_date"]]
    site = keys[["study_id", "facility_id", "month_index"]].merge(
        sites, on=["study_id", "facility_id"], how="left", validate="many_to_one")
    if site["country"].isna().any():
        raise DataError("forecast rows reference study-sites missing from the cohort")
    start = study_start_ordinals(cohort)
    site["study_month"] = (month_ordinal(site["creation_date"]) + site["month_index"].to_numpy()
                           - site["study_id"].map(start).to_numpy() + 1).astype(np.int64)
    site["pred_mean"] = pred
    site = (site.drop(columns="creation_date")
            .sort_values(["study_id", "facility_id", "month_index"], kind="mergesort")
            .reset_index(drop=True))

    study = site.groupby(["study_id", "study_month"], sort=True)["pred_mean"].sum().reset_index()
    # fill gaps so the cumulative series covers every month from 1
    full = []
    for sid, g in study.groupby("study_id", sort=True):
        months = np.arange(1, g["study_month"].max() + 1)
        vals = pd.Series(g["pred_mean"].to_numpy(), index=g["study_month"]).reindex(months, fill_value=0.0)
        full.append(pd.DataFrame({"study_id": sid, "study_month": months, "pred_mean": vals.to_numpy()}))
    study = pd.concat(full, ignore_index=True) if full else study.assign(cumulative=[])
    study["cumulative"] = study.groupby("study_id")["pred_mean"].cumsum()
    country = site.groupby(["study_id", "country", "study_month"], sort=True)["pred_mean"].sum().reset_index()
    targets = cohort.studies.set_index("study_id")["target_enrollment"]
    return ForecastSeries(site, study, country, _milestones(study, targets))


def predict_monthly(model, raw) -> np.ndarray:
    """Per-row predicted means; ``model.predict`` checks the schema hash."""
    return np.asarray(model.predict(raw), dtype=np.float64)


def planning_rows(cohort: Cohort, study_id: str, cap: int = MAX_FORECAST_MONTHS) -> pd.DataFrame:
    """Site-month rows from each site's creation through study month ``cap``."""
    sites = cohort.sites[cohort.sites["study_id"] == study_id].sort_values("facility_id")
    if sites.empty:
        raise DataError(f"study {study_id!r} has no sites")
    first = int(month_ordinal(sites["creation_date"]).min())
    end = pd.Series({study_id: first + cap - 1})
    return expand_site_months(sites.reset_index(drop=True), end)


def _history_panel(cohort: Cohort) -> SiteMonthPanel:
    with_events = set(cohort.events["study_id"])
    keep = [s for s in cohort.studies["study_id"] if s in with_events]
    return build_site_month_panel(cohort.subset(keep))


def forecast_study(model, cohort: Cohort, study_id: str, mode: str = "evaluation",
                   panel: SiteMonthPanel | None = None, feature_config=None,
                   cap: int = MAX_FORECAST_MONTHS) -> ForecastSeries:
    """Forecast one study.

    Evaluation mode predicts each site's observed month span. Planning mode
    extends months until the cumulative prediction reaches the target, or
    the ``cap``-month horizon (flagged in ``capped``).
    """
    from ..features import assemble_design_matrix

    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    panel = panel if panel is not None else _history_panel(cohort)
    if mode == "evaluation":
        rows = panel.frame[panel.frame["study_id"] == study_id]
        if rows.empty:
            raise DataError(f"study {study_id!r} has no observed site-months")
    else:
        rows = planning_rows(cohort, study_id, cap)
    raw = assemble_design_matrix(cohort, panel, feature_config, rows=rows.reset_index(drop=True))
    fc = build_forecast(raw.keys, predict_monthly(model, raw), cohort.subset([study_id]))
    if mode == "planning":
        fc = truncate_at_target(fc, cap)
    return fc


def truncate_at_target(fc: ForecastSeries, cap: int = MAX_FORECAST_MONTHS) -> ForecastSeries:
    """Cut each study's series at its predicted 100% milestone month."""
    last = fc.milestones.set_index("study_id")["last"]
    capped = [s for s, v in last.items() if np.isnan(v)]
    for s in capped:
        logger.warning("study %s does not reach its target within %d months", s, cap)
    limit = last.fillna(np.inf)

    def keep(df):
        return df[df["study_month"].to_numpy() <= df["study_id"].map(limit).to_numpy()].reset_index(drop=True)

    return ForecastSeries(keep(fc.site), keep(fc.study), keep(fc.country), fc.milestones,
                          sorted(set(fc.capped) | set(capped)))
