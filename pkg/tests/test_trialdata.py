from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from conftest import events_for, make_cohort, write_tables
from enrollcast.errors import DataError
from enrollcast.trialdata import (FilterConfig, apply_cohort_filters, build_site_month_panel,
                                  compute_milestones, days_in_month, load_cohort,
                                  milestone_threshold, month_ordinal, summarize_cohort)


def _one_study(tmp_path, events, target="10", ecrf="2018-01-01", created="2018-01-05"):
    studies = [{"study_id": "S", "ecrf_date": ecrf, "target_enrollment": target}]
    sites = [{"study_id": "S", "facility_id": "F", "country": "US", "creation_date": created}]
    return make_cohort(tmp_path, studies, sites, events)


def test_month_ordinal_and_days():
    o = month_ordinal(pd.to_datetime(["2018-01-31", "2020-02-01"]))
    assert list(o) == [2018 * 12, 2020 * 12 + 1]
    assert list(days_in_month(o)) == [31, 29]


def test_load_counts(tmp_path):
    studies = [{"study_id": "S1"}]
    sites = [{"study_id": "S1", "facility_id": f, "country": "US", "creation_date": "2018-01-02"}
             for f in ("F1", "F2")]
    events = events_for("S1", "F1", [("2018-02", 3)]) + events_for("S1", "F2", [("2018-03", 2)])
    c = make_cohort(tmp_path, studies, sites, events)
    assert (len(c.studies), len(c.sites), len(c.events)) == (1, 2, 5)
    rec = c.study("S1")
    assert rec.target_enrollment == 10 and rec.cro_id is None and rec.phase == "III"


def test_dangling_facility_names_row(tmp_path):
    studies = [{"study_id": "S1"}]
    sites = [{"study_id": "S1", "facility_id": "F1", "country": "US", "creation_date": "2018-01-02"}]
    events = events_for("S1", "F1", [("2018-02", 2)]) + events_for("S1", "FX", [("2018-02", 1)])
    with pytest.raises(DataError, match=r"row\(s\) 4"):
        load_cohort(*write_tables(tmp_path, studies, sites, events))


def test_empty_event_file(tmp_path):
    studies = [{"study_id": "S1"}]
    sites = [{"study_id": "S1", "facility_id": "F1", "country": "US", "creation_date": "2018-01-02"}]
    c = make_cohort(tmp_path, studies, sites, [])
    assert len(c.events) == 0


def test_unparseable_date(tmp_path):
    studies = [{"study_id": "S1", "ecrf_date": "not-a-date"}]
    with pytest.raises(DataError, match="ecrf_date"):
        load_cohort(*write_tables(tmp_path, studies, [], []))


def test_bulk_upload_boundary(tmp_path):
    # 10 of 10 in one month: excluded
    ev = events_for("S", "F", [("2018-01", 1), ("2018-05", 9)])
    ev_all = events_for("S", "F", [("2018-05", 10)])
    kept = apply_cohort_filters(_one_study(tmp_path / "a", ev))
    dropped = apply_cohort_filters(_one_study(tmp_path / "b", ev_all))
    assert kept.study_ids == ["S"]
    assert dropped.study_ids == []
    # the single-month study fails the duration rule first in waterfall order
    assert list(dropped.exclusion_log["rule"]) == ["short_duration"]
    bulk = apply_cohort_filters(_one_study(tmp_path / "c", ev_all), FilterConfig(min_duration_months=1))
    assert list(bulk.exclusion_log["rule"]) == ["bulk_upload"]


def test_duration_boundary(tmp_path):
    four = _one_study(tmp_path / "a", events_for("S", "F", [("2018-01", 2), ("2018-04", 2)]))
    three = _one_study(tmp_path / "b", events_for("S", "F", [("2018-01", 2), ("2018-03", 2)]))
    assert apply_cohort_filters(four).study_ids == ["S"]
    out = apply_cohort_filters(three)
    assert out.study_ids == [] and list(out.exclusion_log["rule"]) == ["short_duration"]


def test_filters_zero_enrollment_and_missing_ta(tmp_path):
    studies = [{"study_id": "A"}, {"study_id": "B", "ta": "", "indication_group": "", "indication": ""}]
    sites = [{"study_id": s, "facility_id": "F", "country": "US", "creation_date": "2018-01-02"}
             for s in ("A", "B")]
    events = events_for("B", "F", [("2018-01", 2), ("2018-06", 2)], "b")
    out = apply_cohort_filters(make_cohort(tmp_path, studies, sites, events))
    assert out.study_ids == []
    assert dict(zip(out.exclusion_log["entity_id"], out.exclusion_log["rule"])) == {
        "A": "no_enrollment", "B": "missing_ta"}


def test_panel_counts(tmp_path):
    ev = events_for("S", "F", [("2018-02", 2)]) + [
        {"study_id": "S", "facility_id": "G", "patient_id": "g0", "enrollment_date": "2018-04-20"}]
    studies = [{"study_id": "S"}]
    sites = [{"study_id": "S", "facility_id": "F", "country": "US", "creation_date": "2018-01-10"},
             {"study_id": "S", "facility_id": "G", "country": "US", "creation_date": "2018-04-01"}]
    panel = build_site_month_panel(make_cohort(tmp_path, studies, sites, ev))
    f = panel.frame[panel.frame.facility_id == "F"]
    assert list(f.enrolled_count) == [0, 2, 0, 0]
    assert list(f.month_index) == [0, 1, 2, 3]
    assert list(f.calendar_month) == [1, 2, 3, 4]
    assert list(f.days_in_month) == [31, 28, 31, 30]


def test_panel_site_created_after_end(tmp_path):
    studies = [{"study_id": "S"}]
    sites = [{"study_id": "S", "facility_id": "F", "country": "US", "creation_date": "2018-01-10"},
             {"study_id": "S", "facility_id": "L", "country": "US", "creation_date": "2018-09-01"}]
    ev = events_for("S", "F", [("2018-01", 1), ("2018-04", 1)])
    panel = build_site_month_panel(make_cohort(tmp_path, studies, sites, ev))
    late = panel.frame[panel.frame.facility_id == "L"]
    assert len(late) == 1 and late.enrolled_count.iloc[0] == 0


def test_panel_same_month_events_add(tmp_path):
    ev = events_for("S", "F", [("2018-01", 2), ("2018-04", 1)])
    panel = build_site_month_panel(_one_study(tmp_path, ev))
    assert panel.frame.enrolled_count.iloc[0] == 2


def test_panel_requires_events(tmp_path):
    with pytest.raises(DataError, match="no enrollment"):
        build_site_month_panel(_one_study(tmp_path, []))


def test_panel_conservation(toy_cohort):
    panel = build_site_month_panel(toy_cohort)
    site_sum = panel.frame.groupby(["study_id", "facility_id"])["enrolled_count"].sum()
    ev = toy_cohort.events.groupby(["study_id", "facility_id"]).size()
    assert site_sum.reindex(ev.index).tolist() == ev.tolist()
    for _, g in panel.frame.groupby(["study_id", "facility_id"]):
        assert list(g.month_index) == list(range(len(g)))


def test_milestones_cumulative_scan(tmp_path):
    # monthly totals 5, 5, 5, 5 -> cumulative 5, 10, 15, 20
    ev = events_for("S", "F", [("2018-01", 5), ("2018-02", 5), ("2018-03", 5), ("2018-04", 5)])
    m = compute_milestones(_one_study(tmp_path, ev), "S")
    base = 2018 * 12
    assert (m.pe50, m.pe90, m.last) == (base + 1, base + 3, base + 3)
    assert m.labels()["pe50"] == "2018-02"


def test_milestones_single_and_point_mass(tmp_path):
    one = compute_milestones(_one_study(tmp_path / "a", events_for("S", "F", [("2018-03", 1)])), "S")
    assert one.pe50 == one.pe90 == one.last == 2018 * 12 + 2
    ten = compute_milestones(_one_study(tmp_path / "b", events_for("S", "F", [("2018-01", 10)])), "S")
    assert ten.pe50 == ten.pe90 == ten.last == 2018 * 12


def test_milestone_threshold_integer_math():
    assert milestone_threshold(20, 0.5) == 10
    assert milestone_threshold(20, 0.9) == 18
    assert milestone_threshold(10, 0.9) == 9
    assert milestone_threshold(11, 0.9) == 10
    assert milestone_threshold(1, 0.5) == 1


def test_summary_nonenrolling(tmp_path):
    studies = [{"study_id": "S"}]
    sites = [{"study_id": "S", "facility_id": f, "country": "US", "creation_date": "2018-01-02"}
             for f in ("A", "B")]
    ev = events_for("S", "B", [("2018-01", 2), ("2018-04", 2)])
    table = summarize_cohort(make_cohort(tmp_path, studies, sites, ev))
    assert table.loc["nonenrolling_site_fraction", "mean"] == pytest.approx(0.5)


def test_summary_all_enrolling(toy_cohort):
    table = summarize_cohort(toy_cohort)
    assert table.loc["nonenrolling_site_fraction", "max"] == 0.0
    assert table.loc["trial_total_enrollment", "mean"] == pytest.approx(5.0)
    assert np.isfinite(table.to_numpy()).all()
