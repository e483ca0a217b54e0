from __future__ import annotations

from pathlib import Path

import pandas as pd
import pytest

from enrollcast.trialdata import EVENT_COLUMNS, SITE_COLUMNS, STUDY_COLUMNS, load_cohort

STUDY_DEFAULTS = {
    "ecrf_date": "2018-01-01", "ta": "oncology", "indication_group": "solid_tumor",
    "indication": "breast_cancer", "phase": "III", "sponsor_id": "SP1", "cro_id": "",
    "target_enrollment": "10", "num_arms": "2", "min_age": "18", "max_age": "80",
    "gender": "all", "study_type": "interventional",
}


def write_tables(directory: Path, studies, sites, events) -> tuple[Path, Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    st = pd.DataFrame([{**STUDY_DEFAULTS, **s} for s in studies], columns=STUDY_COLUMNS)
    paths = (directory / "studies.csv", directory / "sites.csv", directory / "events.csv")
    st.to_csv(paths[0], index=False)
    pd.DataFrame(sites, columns=SITE_COLUMNS).to_csv(paths[1], index=False)
    pd.DataFrame(events, columns=EVENT_COLUMNS).to_csv(paths[2], index=False)
    return paths


def make_cohort(directory, studies, sites, events):
    return load_cohort(*write_tables(directory, studies, sites, events))


def events_for(study, facility, months_counts, prefix=None):
    """Events on the 15th of each (YYYY-MM, count) pair."""
    out, i = [], 0
    for ym, n in months_counts:
        for _ in range(n):
            out.append({"study_id": study, "facility_id": facility,
                        "patient_id": f"{prefix or facility}_{i}", "enrollment_date": f"{ym}-15"})
            i += 1
    return out


@pytest.fixture
def toy_cohort(tmp_path):
    """Three hand-checkable studies."""
    studies = [
        {"study_id": "S1", "ecrf_date": "2018-01-01", "target_enrollment": "6"},
        {"study_id": "S2", "ecrf_date": "2018-03-01", "target_enrollment": "4"},
        {"study_id": "S3", "ecrf_date": "2018-06-01", "target_enrollment": "5",
         "ta": "cardiovascular", "indication_group": "heart_failure",
         "indication": "chronic_heart_failure"},
    ]
    sites = [
        {"study_id": "S1", "facility_id": "F1", "country": "US", "creation_date": "2018-01-05"},
        {"study_id": "S1", "facility_id": "F2", "country": "DE", "creation_date": "2018-02-05"},
        {"study_id": "S2", "facility_id": "F1", "country": "US", "creation_date": "2018-03-05"},
        {"study_id": "S3", "facility_id": "F3", "country": "US", "creation_date": "2018-06-05"},
        {"study_id": "S3", "facility_id": "F4", "country": "PL", "creation_date": "2018-07-05"},
    ]
    events = (events_for("S1", "F1", [("2018-01", 1), ("2018-02", 1), ("2018-04", 2)], "a")
              + events_for("S1", "F2", [("2018-03", 2)], "b")
              + events_for("S2", "F1", [("2018-03", 1), ("2018-04", 1), ("2018-06", 2)], "c")
              + events_for("S3", "F3", [("2018-06", 1), ("2018-08", 2), ("2018-09", 1)], "d")
              + events_for("S3", "F4", [("2018-09", 1)], "e"))
    return make_cohort(tmp_path / "toy", studies, sites, events)
