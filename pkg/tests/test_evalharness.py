from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import events_for, make_cohort
from enrollcast.errors import ConfigError, DataError
from enrollcast.evalharness import (HOLDOUT, LEVELS, MetricsReport, MilestoneReport, calibration_report,
                                    compute_metrics, cross_validate, leaderboard, make_random_split,
                                    make_rolling_time_split, milestone_errors, milestone_mae,
                                    write_reports)
from enrollcast.models.forecast import build_forecast
from enrollcast.trialdata import SiteMonthPanel, build_site_month_panel


def _panel_pred(toy_cohort, pred=None):
    panel = build_site_month_panel(toy_cohort)
    keys = panel.frame[["study_id", "facility_id", "month_index"]]
    if pred is None:
        pred = panel.frame["enrolled_count"].to_numpy(float)
    return panel, keys.assign(pred_mean=pred)


def test_random_split_sizes_and_determinism():
    ids = [f"S{i:03d}" for i in range(100)]
    plan = make_random_split(ids, 0.25, 5, seed=1)
    assert len(plan.discovery) == 75 and len(plan.holdout) == 25
    assert [len(plan.fold_studies(k)) for k in range(1, 6)] == [15] * 5
    again = make_random_split(list(reversed(ids)), 0.25, 5, seed=1)
    pd.testing.assert_series_equal(plan.assignment, again.assignment)
    assert not plan.assignment.equals(make_random_split(ids, 0.25, 5, seed=2).assignment)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(12, 200), frac=st.floats(0.0, 0.5), k=st.integers(2, 8), seed=st.integers(0, 10**6))
def test_split_partition_property(n, frac, k, seed):
    ids = [f"S{i}" for i in range(n)]
    try:
        plan = make_random_split(ids, frac, k, seed)
    except ConfigError:
        return
    folds = [set(plan.fold_studies(j)) for j in range(1, k + 1)] + [set(plan.holdout)]
    assert sum(len(f) for f in folds) == n and set().union(*folds) == set(ids)
    sizes = [len(f) for f in folds[:-1]]
    assert max(sizes) - min(sizes) <= 1


def test_split_validation():
    with pytest.raises(ConfigError, match="folds"):
        make_random_split(["a", "b", "c"], 0.25, 5)
    with pytest.raises(ConfigError, match="holdout"):
        make_random_split([str(i) for i in range(50)], 1.0, 5)


def _dated_cohort(tmp_path, dates):
    studies = [{"study_id": f"S{i}", "ecrf_date": d} for i, d in enumerate(dates)]
    sites = [{"study_id": f"S{i}", "facility_id": "F", "country": "US", "creation_date": d}
             for i, d in enumerate(dates)]
    return make_cohort(tmp_path, studies, sites, [])


def test_rolling_split_partition(tmp_path):
    c = _dated_cohort(tmp_path, ["2014-11-03", "2015-02-10", "2015-05-01", "2015-08-20", "2015-08-21"])
    splits = make_rolling_time_split(c, "2015Q1", "2015Q4")
    by_q = {s.quarter: s for s in splits}
    assert by_q["2015Q1"].test == ("S1",) and "S1" not in by_q["2015Q1"].train
    assert all("S1" in by_q[q].train for q in ("2015Q2", "2015Q3"))
    assert "2015Q4" not in by_q  # no studies initiated in Q4
    trains = [set(s.train) for s in splits]
    assert all(a <= b for a, b in zip(trains, trains[1:]))
    for s in splits:
        assert not set(s.train) & set(s.test)


def test_rolling_split_skips_empty_train(tmp_path, caplog):
    c = _dated_cohort(tmp_path, ["2015-02-10", "2015-05-01"])
    with caplog.at_level("INFO"):
        splits = make_rolling_time_split(c, "2015Q1", "2015Q2")
    assert [s.quarter for s in splits] == ["2015Q2"]
    assert "2015Q1 skipped" in caplog.text


def test_metrics_hand_example():
    frame = pd.DataFrame({"study_id": "S", "facility_id": ["A", "B"], "month_index": 0,
                          "enrolled_count": [2, 2]})
    pred = frame[["study_id", "facility_id", "month_index"]].assign(pred_mean=[1.0, 3.0])
    r = compute_metrics(pred, SiteMonthPanel(frame), "study-site-month")
    assert (r.mae, r.mse, r.n) == (1.0, 1.0, 2)
    study = compute_metrics(pred, SiteMonthPanel(frame), "study")
    assert (study.mae, study.mse) == (0.0, 0.0)


def test_metrics_perfect(toy_cohort):
    panel, pred = _panel_pred(toy_cohort)
    for lv in LEVELS:
        r = compute_metrics(pred, panel, lv)
        assert r.mae == 0 and r.mse == 0


def test_metrics_brute_force_aggregation(toy_cohort):
    rng = np.random.default_rng(0)
    panel, pred = _panel_pred(toy_cohort, None)
    pred["pred_mean"] = rng.uniform(0, 3, size=len(pred))
    actual = panel.frame
    for lv, key in (("study", ["study_id"]), ("study-site", ["study_id", "facility_id"])):
        errs = []
        for k in sorted(set(map(tuple, actual[key].to_numpy()))):
            m_p = np.all(pred[key].to_numpy() == np.array(k, dtype=object), axis=1)
            m_a = np.all(actual[key].to_numpy() == np.array(k, dtype=object), axis=1)
            errs.append(pred["pred_mean"][m_p].sum() - actual["enrolled_count"][m_a].sum())
        errs = np.array(errs)
        r = compute_metrics(pred, panel, lv)
        assert r.mae == pytest.approx(np.abs(errs).mean(), abs=1e-12)
        assert r.mse == pytest.approx((errs**2).mean(), abs=1e-12)
        assert r.mae_se == pytest.approx(np.abs(errs).std(ddof=1) / np.sqrt(errs.size))
        assert r.mae**2 <= r.mse + 1e-12


def test_metrics_key_mismatch(toy_cohort):
    panel, pred = _panel_pred(toy_cohort)
    with pytest.raises(DataError, match="mismatch"):
        compute_metrics(pred.iloc[1:], panel, "study")


def test_milestone_errors(tmp_path):
    # 20 patients; actual 50% month is month 2 (cumulative 10)
    studies = [{"study_id": "S", "target_enrollment": "20"}]
    sites = [{"study_id": "S", "facility_id": "F", "country": "US", "creation_date": "2018-01-02"}]
    ev = events_for("S", "F", [("2018-01", 5), ("2018-02", 5), ("2018-03", 5), ("2018-04", 5)])
    cohort = make_cohort(tmp_path, studies, sites, ev)
    panel = build_site_month_panel(cohort)
    keys = panel.frame[["study_id", "facility_id", "month_index"]]
    fc = build_forecast(keys, [3.0, 4.0, 5.0, 8.0], cohort)  # cumulative 3, 7, 12, 20
    e = milestone_errors(fc, cohort).set_index("milestone")
    assert (e.at["pe50", "actual_cum"], e.at["pe50", "pred_cum"]) == (10, 7.0)
    assert e.at["pe50", "actual_month"] == 2 and e.at["pe50", "pred_month"] == 3
    rep = {r.milestone: r for r in milestone_mae(fc, cohort)}
    assert rep["pe50"].mae == 3.0 and rep["pe50"].timing_mae == 1.0
    perfect = build_forecast(keys, panel.frame["enrolled_count"].to_numpy(float), cohort)
    assert all(r.mae == 0 and r.timing_mae == 0 for r in milestone_mae(perfect, cohort))


def test_calibration_full_coverage():
    totals = pd.DataFrame({"study_id": ["a", "b"], "level": 0.9, "lower": -1.0, "upper": 1e9})
    assert calibration_report(totals, pd.Series({"a": 1.0, "b": 2.0}))["coverage"].tolist() == [1.0]


def _r(model, level, mae):
    return MetricsReport(model, level, mae, 1.0, mae**2, 1.0, 10)


def test_leaderboard_best_marked():
    text = leaderboard([_r("hist_rate", "study", 136.0), _r("gbt_tweedie", "study", 67.0)])
    rows = {line.split("|")[1].strip(): line for line in text.splitlines()[2:]}
    assert "**67.000" in rows["gbt_tweedie"] and "**" not in rows["hist_rate"]


def test_leaderboard_single_and_ties():
    one = leaderboard([_r("m", "study", 5.0)])
    assert one.count("**") == 4  # MAE and MSE cells both bold
    tie = leaderboard([_r("a", "study", 2.0), _r("b", "study", 2.0)],
                      [MilestoneReport("a", "pe50", 1.0, 0.1, 3, 0, 1.0, 3)])
    body = tie.splitlines()[2:]
    assert all("**2.000" in line for line in body)
    with pytest.raises(ValueError):
        leaderboard([])


def test_write_reports(tmp_path):
    paths = write_reports(tmp_path, [_r("a", "study", 2.0)], [])
    assert paths["leaderboard"].read_text().startswith("| model |")
    assert pd.read_csv(paths["metrics"])["mae"].tolist() == [2.0]


class _MeanModel:
    def __init__(self, v):
        self.v = v

    def predict(self, raw):
        return np.full(len(raw), self.v)


def test_cross_validate_hygiene(toy_cohort):
    from enrollcast.features import assemble_design_matrix

    panel = build_site_month_panel(toy_cohort)
    raw = assemble_design_matrix(toy_cohort, panel)
    y = panel.frame["enrolled_count"].to_numpy(float)
    plan = make_random_split(["S1", "S2", "S3"], 0.0, 2, seed=0)
    seen = []

    def train_fn(spec, raw, y, mask):
        seen.append(set(raw.keys["study_id"][mask]))
        return _MeanModel(float(y[mask].mean()))

    oof = cross_validate(None, raw, y, plan, train_fn)
    assert len(oof) == len(raw)
    # runs go fold 1, fold 2: each trains on exactly the other fold's studies
    for k, train in zip((1, 2), seen):
        test = set(oof.loc[oof["fold"] == str(k), "study_id"])
        assert test == set(plan.fold_studies(k))
        assert train.isdisjoint(test) and train | test == set(plan.discovery)
    assert set(oof["train_folds"]) == {"2", "1"}
    assert HOLDOUT not in set(oof["fold"])
