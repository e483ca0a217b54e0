"""Trial data model: CSV ingestion, cohort filters, the site-month panel and
enrollment milestones.

Calendar months are handled as integer *month ordinals*
(``year * 12 + month - 1``) so that month arithmetic is plain integer math.
"""
from __future__ import annotations

import calendar
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

STUDY_COLUMNS = [
    "study_id", "ecrf_date", "ta", "indication_group", "indication", "phase",
    "sponsor_id", "cro_id", "target_enrollment", "num_arms", "min_age",
    "max_age", "gender", "study_type",
]
SITE_COLUMNS = ["study_id", "facility_id", "country", "creation_date"]
EVENT_COLUMNS = ["study_id", "facility_id", "patient_id", "enrollment_date"]
EXCLUSION_COLUMNS = ["entity_id", "rule"]

PHASES = ("I", "II", "III", "IV")
GENDERS = ("all", "female", "male")
DEFAULT_SITE_SLACK_MONTHS = 12


def month_ordinal(dates) -> np.ndarray:
    """Calendar month ordinal of each date (``year*12 + month-1``)."""
    d = pd.DatetimeIndex(pd.to_datetime(dates))
    return (d.year.to_numpy(dtype=np.int64) * 12 + d.month.to_numpy(dtype=np.int64) - 1)


def ordinal_to_year_month(ordinal):
    ordinal = np.asarray(ordinal, dtype=np.int64)
    return ordinal // 12, ordinal % 12 + 1


def days_in_month(ordinal) -> np.ndarray:
    years, months = ordinal_to_year_month(np.atleast_1d(ordinal))
    return np.array([calendar.monthrange(int(y), int(m))[1] for y, m in zip(years, months)],
                    dtype=np.int64)


def ordinal_label(ordinal: int) -> str:
    y, m = ordinal_to_year_month(ordinal)
    return f"{int(y):04d}-{int(m):02d}"


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    ecrf_finalization_date: pd.Timestamp
    therapeutic_area: str | None
    indication_group: str | None
    indication: str | None
    phase: str
    sponsor_id: str
    cro_id: str | None
    target_enrollment: int
    num_arms: int | None = None
    min_age: float | None = None
    max_age: float | None = None
    gender_criterion: str = "all"
    study_type: str = "interventional"


@dataclass(frozen=True)
class StudySiteRecord:
    study_id: str
    facility_id: str
    country: str
    creation_date: pd.Timestamp


@dataclass(frozen=True)
class EnrollmentEvent:
    study_id: str
    facility_id: str
    patient_id: str
    enrollment_date: pd.Timestamp


@dataclass(frozen=True)
class Cohort:
    """Relational trial dataset.

    Tables are kept as DataFrames (``studies``, ``sites``, ``events``) whose
    columns follow the CSV schemas; ``exclusion_log`` has columns
    ``entity_id, rule``. Treat instances as read-only.
    """

    studies: pd.DataFrame
    sites: pd.DataFrame
    events: pd.DataFrame
    exclusion_log: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=EXCLUSION_COLUMNS))

    @property
    def study_ids(self) -> list[str]:
        return list(self.studies["study_id"])

    def study(self, study_id: str) -> StudyRecord:
        rows = self.studies[self.studies["study_id"] == study_id]
        if rows.empty:
            raise KeyError(f"unknown study_id {study_id!r}")
        r = rows.iloc[0]

        def opt(v):
            return None if pd.isna(v) or v == "" else v

        return StudyRecord(
            study_id=r["study_id"],
            ecrf_finalization_date=r["ecrf_date"],
            therapeutic_area=opt(r["ta"]),
            indication_group=opt(r["indication_group"]),
            indication=opt(r["indication"]),
            phase=r["phase"],
            sponsor_id=r["sponsor_id"],
            cro_id=opt(r["cro_id"]),
            target_enrollment=int(r["target_enrollment"]),
            num_arms=None if pd.isna(r["num_arms"]) else int(r["num_arms"]),
            min_age=opt(r["min_age"]),
            max_age=opt(r["max_age"]),
            gender_criterion=r["gender"] or "all",
            study_type=r["study_type"],
        )

    def site_records(self, study_id: str) -> list[StudySiteRecord]:
        s = self.sites[self.sites["study_id"] == study_id]
        return [StudySiteRecord(r.study_id, r.facility_id, r.country, r.creation_date)
                for r in s.itertuples(index=False)]

    def subset(self, study_ids) -> "Cohort":
        keep = set(study_ids)
        return Cohort(
            studies=self.studies[self.studies["study_id"].isin(keep)].reset_index(drop=True),
            sites=self.sites[self.sites["study_id"].isin(keep)].reset_index(drop=True),
            events=self.events[self.events["study_id"].isin(keep)].reset_index(drop=True),
            exclusion_log=self.exclusion_log,
        )

    def with_events(self, events: pd.DataFrame) -> "Cohort":
        return Cohort(self.studies, self.sites, events.reset_index(drop=True), self.exclusion_log)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_csv(path, required: list[str], name: str) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{name}: file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{name}: empty file, header required: {','.join(required)}")
    except pd.errors.ParserError as exc:
        raise DataError(f"{name}: malformed CSV: {exc}") from exc
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{name}: missing column(s) {missing}")
    return df


def _bad_rows(mask, name: str, column: str, what: str):
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size:
        rows = ", ".join(str(i + 2) for i in idx[:10])
        raise DataError(f"{name}: {what} in column {column!r} at row(s) {rows}")


def _parse_dates(df: pd.DataFrame, column: str, name: str, required: bool = True) -> pd.Series:
    raw = df[column].str.strip()
    parsed = pd.to_datetime(raw, format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna() & ((raw != "") | required)
    _bad_rows(bad, name, column, "unparseable date")
    return parsed


def _parse_numeric(df, column, name, integer=False, minimum=None) -> pd.Series:
    raw = df[column].str.strip()
    values = pd.to_numeric(raw.replace("", np.nan), errors="coerce")
    _bad_rows(values.isna() & (raw != ""), name, column, "non-numeric value")
    if integer:
        _bad_rows(values.notna() & (values != np.round(values)), name, column, "non-integer value")
    if minimum is not None:
        _bad_rows(values.notna() & (values < minimum), name, column, f"value below {minimum}")
    return values


def _clean_studies(df: pd.DataFrame, name="studies.csv") -> pd.DataFrame:
    out = df.copy()
    for c in df.columns:
        out[c] = df[c].str.strip()
    _bad_rows(out["study_id"] == "", name, "study_id", "empty identifier")
    _bad_rows(out["study_id"].duplicated(), name, "study_id", "duplicate identifier")
    out["ecrf_date"] = _parse_dates(df, "ecrf_date", name)
    _bad_rows(~out["phase"].isin(PHASES), name, "phase", "invalid phase")
    out["gender"] = out["gender"].replace("", "all")
    _bad_rows(~out["gender"].isin(GENDERS), name, "gender", "invalid gender criterion")
    tgt = _parse_numeric(df, "target_enrollment", name, integer=True, minimum=1)
    _bad_rows(tgt.isna(), name, "target_enrollment", "missing value")
    out["target_enrollment"] = tgt.astype(np.int64)
    out["num_arms"] = _parse_numeric(df, "num_arms", name, integer=True, minimum=1)
    out["min_age"] = _parse_numeric(df, "min_age", name, minimum=0)
    out["max_age"] = _parse_numeric(df, "max_age", name, minimum=0)
    _bad_rows(out["min_age"] > out["max_age"], name, "min_age", "min_age above max_age")
    out["study_type"] = out["study_type"].replace("", "interventional")
    for c in ("ta", "indication_group", "indication", "cro_id"):
        out[c] = out[c].replace("", None)
    _check_hierarchy(out, name)
    return out


def _check_hierarchy(studies: pd.DataFrame, name: str):
    for child, parent in (("indication", "indication_group"), ("indication_group", "ta")):
        pairs = studies[[child, parent]].dropna().drop_duplicates()
        dup = pairs[child][pairs[child].duplicated()]
        if len(dup):
            raise DataError(f"{name}: {child} {dup.iloc[0]!r} maps to more than one {parent}")


def _clean_sites(df, studies, slack_months, name="sites.csv") -> pd.DataFrame:
    out = df.copy()
    for c in SITE_COLUMNS:
        out[c] = df[c].str.strip()
    _bad_rows(out["facility_id"] == "", name, "facility_id", "empty identifier")
    _bad_rows(~out["study_id"].isin(studies["study_id"]), name, "study_id", "dangling study_id")
    _bad_rows(out.duplicated(["study_id", "facility_id"]), name, "facility_id",
              "duplicate (study_id, facility_id)")
    out["creation_date"] = _parse_dates(df, "creation_date", name)
    ecrf = out["study_id"].map(studies.set_index("study_id")["ecrf_date"])
    earliest = ecrf - pd.DateOffset(months=slack_months)
    _bad_rows(out["creation_date"] < earliest, name, "creation_date",
              f"creation more than {slack_months} months before ecrf_date")
    for c in df.columns:
        if c not in SITE_COLUMNS:
            out[c] = _parse_numeric(df, c, name)
    return out


def _clean_events(df, sites, name="events.csv") -> pd.DataFrame:
    out = df[EVENT_COLUMNS].copy()
    for c in EVENT_COLUMNS:
        out[c] = df[c].str.strip()
    key = pd.MultiIndex.from_frame(out[["study_id", "facility_id"]])
    site_key = pd.MultiIndex.from_frame(sites[["study_id", "facility_id"]])
    _bad_rows(~key.isin(site_key), name, "facility_id", "dangling (study_id, facility_id)")
    _bad_rows(out.duplicated(["study_id", "patient_id"]), name, "patient_id",
              "duplicate (study_id, patient_id)")
    out["enrollment_date"] = _parse_dates(df, "enrollment_date", name)
    created = pd.Series(sites.set_index(["study_id", "facility_id"])["creation_date"]
                        .reindex(key).to_numpy(), index=out.index)
    _bad_rows(out["enrollment_date"] < created, name, "enrollment_date",
              "enrollment before study-site creation")
    return out


def load_cohort(study_path, site_path, event_path,
                site_slack_months: int = DEFAULT_SITE_SLACK_MONTHS) -> Cohort:
    """Read the three cohort CSVs and enforce referential integrity.

    Raises
    ------
    DataError
        On malformed CSV, unparseable dates or dangling foreign keys; the
        message names the offending column and 1-based file line numbers.
    """
    studies = _clean_studies(_read_csv(study_path, STUDY_COLUMNS, "studies.csv"))
    sites = _clean_sites(_read_csv(site_path, SITE_COLUMNS, "sites.csv"), studies,
                         site_slack_months)
    events = _clean_events(_read_csv(event_path, EVENT_COLUMNS, "events.csv"), sites)
    return Cohort(studies, sites, events)


def _fmt_date(s: pd.Series) -> pd.Series:
    return s.dt.strftime("%Y-%m-%d").fillna("")


def write_cohort(cohort: Cohort, directory) -> dict[str, Path]:
    """Write ``studies.csv``, ``sites.csv`` and ``events.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    st = cohort.studies.copy()
    st["ecrf_date"] = _fmt_date(st["ecrf_date"])
    for c in ("num_arms", "target_enrollment"):
        st[c] = st[c].map(lambda v: "" if pd.isna(v) else str(int(v)))
    for c in ("min_age", "max_age"):
        st[c] = st[c].map(lambda v: "" if pd.isna(v) else f"{float(v):g}")
    si = cohort.sites.copy()
    si["creation_date"] = _fmt_date(si["creation_date"])
    ev = cohort.events.copy()
    ev["enrollment_date"] = _fmt_date(ev["enrollment_date"])
    paths = {
        "studies": directory / "studies.csv",
        "sites": directory / "sites.csv",
        "events": directory / "events.csv",
    }
    extra_st = [c for c in st.columns if c not in STUDY_COLUMNS]
    st[STUDY_COLUMNS + extra_st].to_csv(paths["studies"], index=False, lineterminator="\n")
    extra_si = [c for c in si.columns if c not in SITE_COLUMNS]
    si[SITE_COLUMNS + extra_si].to_csv(paths["sites"], index=False, lineterminator="\n")
    ev[EVENT_COLUMNS].to_csv(paths["events"], index=False, lineterminator="\n")
    return paths


def write_exclusions(cohort: Cohort, path) -> None:
    cohort.exclusion_log[EXCLUSION_COLUMNS].to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Cohort filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterConfig:
    min_duration_months: int = 4
    bulk_month_share: float = 0.9
    excluded_study_types: tuple[str, ...] = ("pediatric", "observational", "device")


def study_enrollment_stats(cohort: Cohort) -> pd.DataFrame:
    """Per-study total, first/last enrollment month and duration (inclusive months)."""
    ev = cohort.events
    ids = cohort.studies["study_id"]
    if ev.empty:
        out = pd.DataFrame({"study_id": ids, "total": 0, "first_ord": np.nan,
                            "last_ord": np.nan, "duration": 0, "max_month_share": 0.0})
        return out.set_index("study_id")
    ords = pd.Series(month_ordinal(ev["enrollment_date"]), index=ev.index)
    g = ords.groupby(ev["study_id"])
    stats = pd.DataFrame({"total": g.size(), "first_ord": g.min(), "last_ord": g.max()})
    per_month = ords.groupby([ev["study_id"], ords]).size()
    stats["max_month_share"] = per_month.groupby(level=0).max() / stats["total"]
    stats["duration"] = stats["last_ord"] - stats["first_ord"] + 1
    stats = stats.reindex(ids)
    stats["total"] = stats["total"].fillna(0).astype(np.int64)
    stats["duration"] = stats["duration"].fillna(0).astype(np.int64)
    stats["max_month_share"] = stats["max_month_share"].fillna(0.0)
    return stats


def apply_cohort_filters(cohort: Cohort, rules: FilterConfig | None = None) -> Cohort:
    """Drop studies failing the cohort rules, in the fixed waterfall order.

    Order: erroneous/incomplete data (no enrollment, duration below
    ``min_duration_months``, missing therapeutic area), pediatric, bulk upload
    (strictly more than ``bulk_month_share`` of subjects in one calendar
    month), observational, device. Each removal is appended to the exclusion
    log with its rule name.
    """
    rules = rules or FilterConfig()
    stats = study_enrollment_stats(cohort)
    studies = cohort.studies.set_index("study_id", drop=False)
    kinds = studies["study_type"].str.lower()

    checks = [
        ("no_enrollment", stats["total"] == 0),
        ("short_duration", (stats["total"] > 0) & (stats["duration"] < rules.min_duration_months)),
        ("missing_ta", studies["ta"].isna()),
    ]
    for kind in ("pediatric",):
        if kind in rules.excluded_study_types:
            checks.append((kind, kinds == kind))
    checks.append(("bulk_upload", stats["max_month_share"] > rules.bulk_month_share))
    for kind in rules.excluded_study_types:
        if kind != "pediatric":
            checks.append((kind, kinds == kind))

    removed: list[tuple[str, str]] = []
    alive = pd.Series(True, index=studies.index)
    for rule, mask in checks:
        hit = alive & mask.reindex(studies.index).fillna(False).astype(bool)
        removed.extend((sid, rule) for sid in studies.index[hit])
        alive &= ~hit
    out = cohort.subset(studies.index[alive])
    log = pd.concat([cohort.exclusion_log,
                     pd.DataFrame(removed, columns=EXCLUSION_COLUMNS)], ignore_index=True)
    if removed:
        logger.info("cohort filters removed %d of %d studies", len(removed), len(studies))
    return Cohort(out.studies, out.sites, out.events, log)


# ---------------------------------------------------------------------------
# Site-month panel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteMonthPanel:
    """Study-site-month grid with observed counts.

    ``frame`` columns: study_id, facility_id, month_index, month_ord,
    calendar_month, days_in_month, enrolled_count. Rows are sorted by
    (study_id, facility_id, month_index).
    """

    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    def site_totals(self) -> pd.DataFrame:
        g = self.frame.groupby(["study_id", "facility_id"], sort=True)
        return pd.DataFrame({
            "total": g["enrolled_count"].sum(),
            "n_months": g.size(),
        }).reset_index()

    def subset(self, study_ids) -> "SiteMonthPanel":
        f = self.frame
        return SiteMonthPanel(f[f["study_id"].isin(set(study_ids))].reset_index(drop=True))


def expand_site_months(sites: pd.DataFrame, end_ord: pd.Series) -> pd.DataFrame:
    """Rows from each site's creation month through ``end_ord`` (by study).

    A site created after its study's end month gets a single row.
    """
    start = month_ordinal(sites["creation_date"])
    end = sites["study_id"].map(end_ord).to_numpy(dtype=np.int64)
    n = np.maximum(end - start + 1, 1)
    rep = np.repeat(np.arange(len(sites)), n)
    offsets = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    ords = start[rep] + offsets
    frame = pd.DataFrame({
        "study_id": sites["study_id"].to_numpy()[rep],
        "facility_id": sites["facility_id"].to_numpy()[rep],
        "month_index": offsets.astype(np.int64),
        "month_ord": ords.astype(np.int64),
    })
    frame["calendar_month"] = (frame["month_ord"] % 12 + 1).astype(np.int64)
    frame["days_in_month"] = _days_lookup(frame["month_ord"].to_numpy())
    return frame


def _days_lookup(ords: np.ndarray) -> np.ndarray:
    if ords.size == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = int(ords.min()), int(ords.max())
    table = days_in_month(np.arange(lo, hi + 1))
    return table[ords - lo]


def build_site_month_panel(cohort: Cohort) -> SiteMonthPanel:
    """Expand sites into contiguous months from creation to the study's
    last-patient-enrolled month, counting events per calendar month."""
    stats = study_enrollment_stats(cohort)
    empty = stats.index[stats["total"] == 0]
    if len(empty):
        raise DataError(f"study {empty[0]!r} has no enrollment events; apply cohort filters first")
    sites = cohort.sites.sort_values(["study_id", "facility_id"]).reset_index(drop=True)
    frame = expand_site_months(sites, stats["last_ord"].astype(np.int64))
    ev = cohort.events
    counts = (pd.DataFrame({"study_id": ev["study_id"], "facility_id": ev["facility_id"],
                            "month_ord": month_ordinal(ev["enrollment_date"])})
              .groupby(["study_id", "facility_id", "month_ord"]).size()
              .rename("enrolled_count").reset_index())
    frame = frame.merge(counts, on=["study_id", "facility_id", "month_ord"], how="left")
    frame["enrolled_count"] = frame["enrolled_count"].fillna(0).astype(np.int64)
    return SiteMonthPanel(frame)


# ---------------------------------------------------------------------------
# Milestones and summaries
# ---------------------------------------------------------------------------

MILESTONE_FRACTIONS = {"pe50": 0.5, "pe90": 0.9, "last": 1.0}


def milestone_threshold(total: int, fraction: float) -> int:
    """Smallest integer count >= fraction * total, computed without float slop."""
    num, den = {0.5: (1, 2), 0.9: (9, 10), 1.0: (1, 1)}.get(fraction, (None, None))
    if num is None:
        return int(np.ceil(fraction * total - 1e-12))
    return -(-num * total // den)


@dataclass(frozen=True)
class MilestoneDates:
    """Month ordinals at which cumulative enrollment first reaches 50%, 90%
    and 100% of the study total."""

    study_id: str
    total: int
    pe50: int
    pe90: int
    last: int

    def labels(self) -> dict[str, str]:
        return {k: ordinal_label(getattr(self, k)) for k in MILESTONE_FRACTIONS}


def first_reaching(month_ords: np.ndarray, cumulative: np.ndarray, threshold: float):
    hit = np.flatnonzero(cumulative >= threshold)
    return int(month_ords[hit[0]]) if hit.size else None


def compute_milestones(cohort: Cohort, study_id: str) -> MilestoneDates:
    ev = cohort.events[cohort.events["study_id"] == study_id]
    if ev.empty:
        if study_id not in set(cohort.studies["study_id"]):
            raise KeyError(f"unknown study_id {study_id!r}")
        raise DataError(f"study {study_id!r} has no enrollment events")
    ords = np.sort(month_ordinal(ev["enrollment_date"]))
    n = len(ords)
    # ords sorted: cumulative count after i events is i + 1
    cum = np.arange(1, n + 1)
    out = {k: first_reaching(ords, cum, milestone_threshold(n, f))
           for k, f in MILESTONE_FRACTIONS.items()}
    return MilestoneDates(study_id, n, **out)


def all_milestones(cohort: Cohort) -> pd.DataFrame:
    rows = []
    for sid in cohort.studies["study_id"]:
        try:
            m = compute_milestones(cohort, sid)
        except DataError:
            continue
        rows.append((sid, m.total, m.pe50, m.pe90, m.last))
    return pd.DataFrame(rows, columns=["study_id", "total", "pe50", "pe90", "last"])


def _describe(values) -> dict:
    v = np.asarray(values, dtype=float)
    q = np.percentile(v, [25, 50, 75])
    return {"mean": v.mean(), "sd": v.std(ddof=1) if v.size > 1 else 0.0, "min": v.min(),
            "p25": q[0], "median": q[1], "p75": q[2], "max": v.max()}


def summarize_cohort(cohort: Cohort, panel: SiteMonthPanel | None = None) -> pd.DataFrame:
    """Six-row enrollment statistics table (mean, SD, min, quartiles, max)."""
    if cohort.studies.empty:
        raise DataError("cannot summarize an empty cohort")
    panel = panel if panel is not None else build_site_month_panel(cohort)
    stats = study_enrollment_stats(cohort)
    site = panel.site_totals()
    nonenrolling = site.groupby("study_id")["total"].apply(lambda t: float((t == 0).mean()))
    rows = {
        "trial_enrollment_duration_months": stats["duration"],
        "trial_total_enrollment": stats["total"],
        "site_enrollment_duration_months": site["n_months"],
        "site_total_enrollment": site["total"],
        "site_month_enrollment": panel.frame["enrolled_count"],
        "nonenrolling_site_fraction": nonenrolling,
    }
    return pd.DataFrame({k: _describe(v) for k, v in rows.items()}).T
