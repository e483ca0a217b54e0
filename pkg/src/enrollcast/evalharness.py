"""Split protocols, multi-level error metrics, milestone errors, interval
calibration and model comparison tables."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .models.forecast import ForecastSeries, build_forecast, study_start_ordinals
from .trialdata import (MILESTONE_FRACTIONS, Cohort, SiteMonthPanel, all_milestones,
                        milestone_threshold, month_ordinal)

logger = logging.getLogger(__name__)

LEVELS = ("study", "study-site", "study-site-month")
HOLDOUT = "holdout"
_LEVEL_KEYS = {
    "study": ["study_id"],
    "study-site": ["study_id", "facility_id"],
    "study-site-month": ["study_id", "facility_id", "month_index"],
}


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """``assignment`` maps study_id to a fold number 1..k or ``"holdout"``."""

    assignment: pd.Series
    seed: int
    holdout_fraction: float
    k_folds: int

    def fold_studies(self, k: int) -> list[str]:
        return sorted(self.assignment.index[self.assignment == k])

    @property
    def discovery(self) -> list[str]:
        return sorted(self.assignment.index[self.assignment != HOLDOUT])

    @property
    def holdout(self) -> list[str]:
        return sorted(self.assignment.index[self.assignment == HOLDOUT])

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"study_id": self.assignment.index,
                             "assignment": self.assignment.astype(str).to_numpy()})


def make_random_split(study_ids, holdout_fraction: float = 0.25, k_folds: int = 5,
                      seed: int = 0) -> SplitPlan:
    """Seeded study-level split: a holdout share, then ``k_folds`` balanced
    discovery folds."""
    ids = sorted(set(study_ids))
    if k_folds < 2:
        raise ConfigError("eval.folds: need at least 2 folds")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ConfigError("eval.holdout_fraction: must lie in [0, 1)")
    n_hold = int(round(len(ids) * holdout_fraction))
    if len(ids) - n_hold < k_folds or len(ids) < k_folds + 1:
        raise ConfigError(f"too few studies ({len(ids)}) for {k_folds} folds plus holdout")
    order = np.random.default_rng(seed).permutation(len(ids))
    assign = np.empty(len(ids), dtype=object)
    assign[order[:n_hold]] = HOLDOUT
    disc = order[n_hold:]
    assign[disc] = [int(i % k_folds) + 1 for i in range(disc.size)]
    return SplitPlan(pd.Series(assign, index=ids, name="assignment"), seed, holdout_fraction, k_folds)


@dataclass(frozen=True)
class QuarterSplit:
    quarter: str
    train: tuple[str, ...]
    test: tuple[str, ...]


def _quarter(q) -> pd.Period:
    try:
        return pd.Period(str(q), freq="Q")
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"eval.quarters: cannot parse quarter {q!r}") from exc


def make_rolling_time_split(cohort: Cohort, start_quarter, end_quarter) -> list[QuarterSplit]:
    """For each quarter: train on studies initiated strictly before it, test
    on studies initiated within it. Quarters with an empty train or test set
    are skipped (logged)."""
    q0, q1 = _quarter(start_quarter), _quarter(end_quarter)
    if q1 < q0:
        raise ConfigError(f"eval.quarters: empty range {q0}..{q1}")
    st = cohort.studies
    start = pd.DatetimeIndex(st["ecrf_date"])
    out = []
    for q in pd.period_range(q0, q1, freq="Q"):
        lo, hi = q.start_time, q.end_time
        train = tuple(sorted(st["study_id"][start < lo]))
        test = tuple(sorted(st["study_id"][(start >= lo) & (start <= hi)]))
        if not train:
            logger.info("quarter %s skipped: no studies initiated earlier", q)
            continue
        if not test:
            logger.info("quarter %s skipped: no studies initiated within it", q)
            continue
        out.append(QuarterSplit(str(q), train, test))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    model: str
    level: str
    mae: float
    mae_se: float
    mse: float
    mse_se: float
    n: int


def _se(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0


def aligned_errors(pred: pd.DataFrame, panel: SiteMonthPanel, level: str) -> pd.DataFrame:
    """pred - actual per unit at ``level`` (study_id, ..., pred, actual, error)."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    key = _LEVEL_KEYS["study-site-month"]
    actual = panel.frame[key + ["enrolled_count"]]
    merged = pred[key + ["pred_mean"]].merge(actual, on=key, how="outer", indicator=True)
    if (merged["_merge"] != "both").any():
        bad = merged[merged["_merge"] != "both"].iloc[0]
        raise DataError(f"prediction/panel key mismatch at {tuple(bad[key])}")
    g = merged.groupby(_LEVEL_KEYS[level], sort=True)[["pred_mean", "enrolled_count"]].sum()
    g = g.rename(columns={"pred_mean": "pred", "enrolled_count": "actual"}).reset_index()
    g["error"] = g["pred"] - g["actual"]
    return g


def compute_metrics(pred: pd.DataFrame, panel: SiteMonthPanel, level: str,
                    model: str = "model") -> MetricsReport:
    """MAE and MSE of totals aggregated to ``level``, with SD/sqrt(n) errors.

    ``panel`` must hold exactly the evaluated rows (subset it first).
    """
    e = aligned_errors(pred, panel, level)["error"].to_numpy(np.float64)
    if e.size == 0:
        raise DataError("no units to evaluate")
    a, s = np.abs(e), e**2
    return MetricsReport(model, level, float(a.mean()), _se(a), float(s.mean()), _se(s), int(e.size))


@dataclass(frozen=True)
class MilestoneReport:
    model: str
    milestone: str
    mae: float
    mae_se: float
    n: int
    n_skipped: int
    timing_mae: float
    timing_n: int


def milestone_errors(forecast: ForecastSeries, cohort: Cohort) -> pd.DataFrame:
    """Per study and milestone: actual and predicted cumulative enrollment at
    the actual milestone month, plus predicted vs actual milestone month
    (predicted month uses the same threshold on the forecast cumulative)."""
    actual = all_milestones(cohort).set_index("study_id")
    start = study_start_ordinals(cohort)
    ev = cohort.events
    ev_month = pd.Series(month_ordinal(ev["enrollment_date"]), index=ev.index)
    rows = []
    for sid, g in forecast.study.groupby("study_id", sort=True):
        if sid not in actual.index:
            continue
        cum = g["cumulative"].to_numpy()
        months = g["study_month"].to_numpy()
        ords = np.sort(ev_month[ev["study_id"] == sid].to_numpy())
        total = int(actual.at[sid, "total"])
        for name, frac in MILESTONE_FRACTIONS.items():
            m_ord = actual.at[sid, name]
            if pd.isna(m_ord):
                rows.append({"study_id": sid, "milestone": name, "available": False})
                continue
            sm = int(m_ord) - int(start[sid]) + 1
            act_cum = int(np.searchsorted(ords, int(m_ord), side="right"))
            pred_cum = float(cum[min(sm, months[-1]) - 1]) if sm >= 1 else 0.0
            hit = np.flatnonzero(cum >= milestone_threshold(total, frac) * (1 - 1e-12))
            rows.append({"study_id": sid, "milestone": name, "available": True,
                         "actual_month": sm, "actual_cum": act_cum, "pred_cum": pred_cum,
                         "pred_month": float(months[hit[0]]) if hit.size else np.nan})
    return pd.DataFrame(rows)


def milestone_mae(forecast: ForecastSeries, cohort: Cohort, model: str = "model") -> list[MilestoneReport]:
    """Cumulative-count MAE at each actual milestone month; the timing MAE
    (months) is a supplementary column over studies whose forecast reaches
    the milestone."""
    df = milestone_errors(forecast, cohort)
    out = []
    for name in MILESTONE_FRACTIONS:
        d = df[df["milestone"] == name] if len(df) else df
        ok = d[d["available"]] if len(d) else d
        err = np.abs(ok["pred_cum"] - ok["actual_cum"]).to_numpy(np.float64) if len(ok) else np.zeros(0)
        timing = (np.abs(ok["pred_month"] - ok["actual_month"]).dropna().to_numpy(np.float64)
                  if len(ok) else np.zeros(0))
        out.append(MilestoneReport(
            model, name, float(err.mean()) if err.size else np.nan, _se(err), int(err.size),
            int(len(d) - len(ok)), float(timing.mean()) if timing.size else np.nan, int(timing.size)))
    return out


def calibration_report(totals: pd.DataFrame, actual_totals: pd.Series, levels=None) -> pd.DataFrame:
    """Per nominal level, the fraction of studies whose actual final
    enrollment lies inside [lower, upper]."""
    levels = sorted(totals["level"].unique()) if levels is None else list(levels)
    rows = []
    for lv in levels:
        b = totals[np.isclose(totals["level"], lv)].set_index("study_id")
        common = b.index.intersection(actual_totals.index)
        a = actual_totals.reindex(common).to_numpy(np.float64)
        inside = (b.loc[common, "lower"].to_numpy() <= a) & (a <= b.loc[common, "upper"].to_numpy())
        rows.append({"level": float(lv), "coverage": float(inside.mean()) if inside.size else np.nan,
                     "n": int(inside.size)})
    return pd.DataFrame(rows, columns=["level", "coverage", "n"])


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def evaluate_forecast(pred: pd.DataFrame, panel: SiteMonthPanel, cohort: Cohort, model: str):
    """All three metric levels plus milestone reports for one model's
    predictions over the studies in ``pred``."""
    studies = sorted(pred["study_id"].unique())
    sub_panel = panel.subset(studies)
    reports = [compute_metrics(pred, sub_panel, lv, model) for lv in LEVELS]
    fc = build_forecast(pred[["study_id", "facility_id", "month_index"]], pred["pred_mean"],
                        cohort.subset(studies))
    return reports, milestone_mae(fc, cohort.subset(studies), model)


def cross_validate(spec, raw, y, plan: SplitPlan, train_fn, include_holdout: bool = False) -> pd.DataFrame:
    """Out-of-fold predictions over the discovery studies.

    ``train_fn(spec, raw, y, train_mask)`` returns an object with
    ``predict(raw)``. Each row carries its test ``fold`` and the
    ``train_folds`` that produced it, so CV hygiene can be audited.
    With ``include_holdout`` the holdout is predicted by a model trained on
    all discovery folds (fold tag ``holdout``).
    """
    study = raw.keys["study_id"].to_numpy()
    assign = plan.assignment.reindex(study).to_numpy()
    if pd.isna(assign).any():
        raise DataError("feature rows belong to studies outside the split plan")
    parts = []
    folds = list(range(1, plan.k_folds + 1))
    runs = [(k, [f for f in folds if f != k]) for k in folds]
    if include_holdout:
        runs.append((HOLDOUT, folds))
    for test, train_folds in runs:
        train_mask = np.isin(assign, np.array(train_folds, dtype=object))
        test_mask = assign == test
        if not test_mask.any():
            continue
        model = train_fn(spec, raw, y, train_mask)
        test_rows = raw.take(test_mask)
        parts.append(test_rows.keys.assign(
            pred_mean=model.predict(test_rows), fold=str(test),
            train_folds=",".join(str(f) for f in train_folds)))
        logger.info("fold %s: trained on %d rows, predicted %d rows", test, train_mask.sum(), test_mask.sum())
    return pd.concat(parts, ignore_index=True)


def rolling_evaluation(spec, raw, y, splits: list[QuarterSplit], train_fn) -> pd.DataFrame:
    """Retrain per quarter with fixed hyperparameters; study-level MAE on the
    quarter's test studies. Returns quarter, n_train, n_test, mae, and the
    out-of-sample predictions in ``attrs['predictions']``."""
    study = raw.keys["study_id"].to_numpy()
    rows, preds = [], []
    for qs in splits:
        train_mask = np.isin(study, np.array(qs.train, dtype=object))
        test_mask = np.isin(study, np.array(qs.test, dtype=object))
        model = train_fn(spec, raw, y, train_mask)
        test_rows = raw.take(test_mask)
        p = test_rows.keys.assign(pred_mean=model.predict(test_rows), actual=y[test_mask],
                                  quarter=qs.quarter)
        preds.append(p)
        tot = p.groupby("study_id")[["pred_mean", "actual"]].sum()
        rows.append({"quarter": qs.quarter, "n_train": len(qs.train), "n_test": len(qs.test),
                     "mae": float(np.abs(tot["pred_mean"] - tot["actual"]).mean())})
    out = pd.DataFrame(rows, columns=["quarter", "n_train", "n_test", "mae"])
    out.attrs["predictions"] = pd.concat(preds, ignore_index=True) if preds else pd.DataFrame()
    return out


def per_quarter_mae(pred: pd.DataFrame, y_by_row, cohort: Cohort, quarters) -> pd.DataFrame:
    """Study-level MAE of existing predictions grouped by initiation quarter."""
    p = pred.assign(actual=np.asarray(y_by_row, dtype=np.float64))
    tot = p.groupby("study_id")[["pred_mean", "actual"]].sum()
    start = cohort.studies.set_index("study_id")["ecrf_date"]
    q = pd.PeriodIndex(pd.DatetimeIndex(start.reindex(tot.index)), freq="Q").astype(str)
    tot["quarter"] = q
    tot["ae"] = np.abs(tot["pred_mean"] - tot["actual"])
    g = tot[tot["quarter"].isin(set(quarters))].groupby("quarter")["ae"]
    return pd.DataFrame({"n_test": g.size(), "mae": g.mean()}).reset_index()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def metrics_frame(reports) -> pd.DataFrame:
    return pd.DataFrame([r.__dict__ for r in reports],
                        columns=["model", "level", "mae", "mae_se", "mse", "mse_se", "n"])


def milestones_frame(reports) -> pd.DataFrame:
    return pd.DataFrame([r.__dict__ for r in reports],
                        columns=["model", "milestone", "mae", "mae_se", "n", "n_skipped",
                                 "timing_mae", "timing_n"])


def _fmt(v: float, se: float | None = None) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "n/a"
    return f"{v:.3f}" if se is None else f"{v:.3f} ({se:.3f})"


def leaderboard(reports, milestones=()) -> str:
    """Markdown table: one row per model, MAE/MSE at three levels and
    milestone MAEs; per-column minima (ties included) in bold."""
    reports = list(reports)
    if not reports:
        raise ValueError("leaderboard needs at least one report")
    models = list(dict.fromkeys(r.model for r in reports))
    cols: list[tuple[str, dict]] = []
    for lv in LEVELS:
        for stat in ("mae", "mse"):
            vals = {r.model: (getattr(r, stat), getattr(r, stat + "_se")) for r in reports if r.level == lv}
            if vals:
                cols.append((f"{lv} {stat.upper()}", vals))
    for name in MILESTONE_FRACTIONS:
        vals = {m.model: (m.mae, m.mae_se) for m in milestones if m.milestone == name}
        if vals:
            cols.append((f"{name} MAE", vals))
    header = "| model | " + " | ".join(c for c, _ in cols) + " |"
    lines = [header, "|" + "---|" * (len(cols) + 1)]
    best = {}
    for c, vals in cols:
        finite = [v for v, _ in vals.values() if v is not None and np.isfinite(v)]
        best[c] = min(finite) if finite else None
    for m in models:
        cells = []
        for c, vals in cols:
            if m not in vals:
                cells.append("")
                continue
            v, se = vals[m]
            text = _fmt(v, se)
            if best[c] is not None and np.isfinite(v) and np.isclose(v, best[c], rtol=1e-12, atol=0):
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_reports(directory, reports, milestones, calibration: pd.DataFrame | None = None) -> dict:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": d / "metrics.csv", "milestones": d / "milestones.csv",
             "leaderboard": d / "leaderboard.md"}
    metrics_frame(reports).to_csv(paths["metrics"], index=False, lineterminator="\n", float_format="%.10g")
    milestones_frame(milestones).to_csv(paths["milestones"], index=False, lineterminator="\n",
                                        float_format="%.10g")
    paths["leaderboard"].write_text(leaderboard(reports, milestones))
    if calibration is not None:
        paths["calibration"] = d / "calibration.csv"
        calibration.to_csv(paths["calibration"], index=False, lineterminator="\n", float_format="%.10g")
    return paths
