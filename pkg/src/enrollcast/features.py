"""Feature matrix construction.

Historical features summarise enrollment of study-sites that finished
enrolling strictly before the focal study's eCRF finalization date, so no
information from the focal study's own enrollment window can leak in.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError
from .trialdata import Cohort, SiteMonthPanel, days_in_month, month_ordinal

logger = logging.getLogger(__name__)

LEVELS = ("study", "country", "site", "site-month")
KINDS = ("numeric", "history", "categorical")
OTHER = "__OTHER__"

KEY_COLUMNS = {
    "facility": "facility_id",
    "country": "country",
    "indication": "indication",
    "indication_group": "indication_group",
    "ta": "ta",
    "therapeutic_area": "ta",
    "phase": "phase",
}
# each grouping key fixes these coarser keys
_IMPLIES = {
    "facility": ("country",),
    "indication": ("indication_group",),
    "indication_group": ("ta",),
}


def _closure(keys) -> frozenset:
    out, todo = set(), [("ta" if k == "therapeutic_area" else k) for k in keys]
    while todo:
        k = todo.pop()
        if k not in out:
            out.add(k)
            todo.extend(_IMPLIES.get(k, ()))
    return frozenset(out)


@dataclass(frozen=True)
class GroupingSpec:
    """Historical aggregate over study-sites sharing the grouping values.

    ``metric`` is ``"rate"`` (mean of per-site count/duration) or
    ``"monthly"`` (pooled count per site-month).
    """

    keys: tuple[str, ...]
    metric: str = "rate"

    def __post_init__(self):
        if not self.keys:
            raise ValueError("grouping must be non-empty")
        unknown = [k for k in self.keys if k not in KEY_COLUMNS]
        if unknown:
            raise ValueError(f"unknown grouping keys {unknown}")
        if self.metric not in ("rate", "monthly"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def name(self) -> str:
        keys = ["ta" if k == "therapeutic_area" else k for k in self.keys]
        return f"hist_{self.metric}__{'+'.join(keys)}"

    @property
    def level(self) -> str:
        if "facility" in self.keys:
            return "site"
        if "country" in self.keys:
            return "country"
        return "study"

    def coarser_than(self, other: "GroupingSpec") -> bool:
        return _closure(self.keys) < _closure(other.keys)

    @classmethod
    def parse(cls, name: str) -> "GroupingSpec":
        head, _, keys = name.partition("__")
        return cls(tuple(keys.split("+")), head.removeprefix("hist_"))


@dataclass(frozen=True)
class ImputationLadder:
    """Columns ordered finest to coarsest; a missing value takes the first
    available value further up."""

    rungs: tuple[str, ...]

    def __post_init__(self):
        if len(self.rungs) < 2:
            raise ValueError("a ladder needs at least two rungs")
        specs = []
        for r in self.rungs:
            try:
                specs.append(GroupingSpec.parse(r))
            except ValueError:
                specs.append(None)
        for a, b in zip(specs, specs[1:]):
            if a is not None and b is not None and not b.coarser_than(a):
                raise ValueError(f"ladder rung {b.name} is not coarser than {a.name}")


def _specs(metric, *groups):
    return tuple(GroupingSpec(tuple(g), metric) for g in groups)


_DEFAULT_GROUPS = (
    ("facility",), ("facility", "indication"), ("facility", "ta"),
    ("country",), ("country", "indication"), ("country", "indication_group"),
    ("country", "ta"), ("country", "phase"),
    ("indication",), ("indication_group",), ("ta",), ("phase",), ("ta", "phase"),
)


def _default_ladders(metric: str) -> tuple[ImputationLadder, ...]:
    n = lambda *k: GroupingSpec(k, metric).name  # noqa: E731
    return (
        ImputationLadder((n("facility", "indication"), n("facility", "ta"), n("facility"))),
        ImputationLadder((n("country", "indication"), n("country", "indication_group"),
                          n("country", "ta"), n("country"))),
        ImputationLadder((n("indication"), n("indication_group"), n("ta"))),
    )


BASELINE_LADDER = ImputationLadder((
    "hist_rate__facility+indication", "hist_rate__country+indication",
    "hist_rate__indication", "hist_rate__indication_group", "hist_rate__ta",
))


@dataclass(frozen=True)
class FeatureConfig:
    history_specs: tuple[GroupingSpec, ...] = (
        _specs("rate", *_DEFAULT_GROUPS) + _specs("monthly", *_DEFAULT_GROUPS))
    ladders: tuple[ImputationLadder, ...] = _default_ladders("rate") + _default_ladders("monthly") + (
        ImputationLadder(("prev_country", "prev_global")),)
    prevalence: bool = True
    include_sponsor: bool = True


@dataclass(frozen=True)
class ColumnMeta:
    level: str
    kind: str
    ladder_rung: int | None = None

    @property
    def categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass
class FeatureMatrix:
    """Design matrix keyed by (study_id, facility_id, month_index).

    Numeric columns hold floats with NaN as the missing marker; categorical
    columns hold strings with None as missing. ``imputation`` maps an imputed
    column to the ladder rung that supplied each row (-1 when still missing).
    """

    keys: pd.DataFrame
    data: pd.DataFrame
    meta: dict[str, ColumnMeta]
    imputation: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.keys) != len(self.data):
            raise DataError("keys and data differ in length")
        missing = [c for c in self.data.columns if c not in self.meta]
        if missing:
            raise DataError(f"columns without metadata: {missing}")

    def __len__(self):
        return len(self.keys)

    @property
    def columns(self) -> list[str]:
        return list(self.data.columns)

    def to_numpy(self) -> np.ndarray:
        cats = [c for c in self.columns if self.meta[c].categorical]
        if cats:
            raise DataError(f"categorical columns need preprocessing first: {cats[:3]}")
        return self.data.to_numpy(dtype=np.float64)

    def schema_hash(self) -> str:
        text = "\n".join(f"{c}:{self.meta[c].level}:{self.meta[c].kind}" for c in self.columns)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def take(self, mask) -> "FeatureMatrix":
        mask = np.asarray(mask)
        return FeatureMatrix(
            self.keys[mask].reset_index(drop=True),
            self.data[mask].reset_index(drop=True),
            dict(self.meta),
            {k: v[mask] for k, v in self.imputation.items()},
        )

    def study_mask(self, study_ids) -> np.ndarray:
        return self.keys["study_id"].isin(set(study_ids)).to_numpy()

    def write(self, path, schema_path=None) -> None:
        """Persist as ``features.csv`` plus a sidecar ``schema.csv``."""
        path = Path(path)
        schema_path = Path(schema_path) if schema_path else path.with_name("schema.csv")
        pd.concat([self.keys, self.data], axis=1).to_csv(
            path, index=False, lineterminator="\n", float_format="%.17g")
        pd.DataFrame({
            "column": self.columns,
            "level": [self.meta[c].level for c in self.columns],
            "kind": [self.meta[c].kind for c in self.columns],
            "imputation_rung_default": ["" if self.meta[c].ladder_rung is None
                                        else str(self.meta[c].ladder_rung) for c in self.columns],
        }).to_csv(schema_path, index=False, lineterminator="\n")

    @classmethod
    def read(cls, path, schema_path=None) -> "FeatureMatrix":
        path = Path(path)
        schema_path = Path(schema_path) if schema_path else path.with_name("schema.csv")
        schema = pd.read_csv(schema_path, dtype=str, keep_default_na=False)
        meta = {r.column: ColumnMeta(r.level, r.kind,
                                     int(r.imputation_rung_default) if r.imputation_rung_default else None)
                for r in schema.itertuples(index=False)}
        dtypes = {c: (str if m.categorical else np.float64) for c, m in meta.items()}
        dtypes.update(study_id=str, facility_id=str, month_index=np.int64)
        df = pd.read_csv(path, dtype=dtypes, keep_default_na=False,
                         na_values={c: [""] for c, m in meta.items() if not m.categorical})
        for c, m in meta.items():
            if m.categorical:
                df[c] = df[c].replace("", None)
        keys = df[["study_id", "facility_id", "month_index"]]
        return cls(keys, df[list(meta)], meta)


# ---------------------------------------------------------------------------
# historical aggregates
# ---------------------------------------------------------------------------

def site_history_table(cohort: Cohort, panel: SiteMonthPanel) -> pd.DataFrame:
    """One row per study-site with outcome totals and its completion date
    (the study's last enrollment date)."""
    totals = panel.site_totals()
    st = cohort.studies.set_index("study_id")
    last = cohort.events.groupby("study_id")["enrollment_date"].max()
    sites = cohort.sites[["study_id", "facility_id", "country"]]
    h = totals.merge(sites, on=["study_id", "facility_id"], how="left")
    for c in ("ta", "indication_group", "indication", "phase"):
        h[c] = h["study_id"].map(st[c])
    h["rate"] = h["total"] / h["n_months"]
    h["completion_date"] = h["study_id"].map(last)
    return h


def _day_number(dates) -> np.ndarray:
    return pd.DatetimeIndex(dates).to_numpy().astype("datetime64[D]").astype(np.int64)


def _cutoff_sums(hist: pd.DataFrame, keys: list[str], focal: pd.DataFrame,
                 cutoff: pd.Series, values: list[str]) -> pd.DataFrame:
    """For each focal row, sums of ``values`` (and a count) over historical rows
    sharing ``keys`` whose completion date is strictly before the row's cutoff.

    Sums are accumulated sequentially within each group in completion order,
    so a focal result depends only on the qualifying rows themselves.
    """
    nh, nf = len(hist), len(focal)
    if keys:
        both = pd.concat([hist[keys], focal[keys]], ignore_index=True)
        codes = both.groupby(keys, sort=True, dropna=False).ngroup().to_numpy(np.int64)
        # rows with a missing grouping value never match
        nan_rows = both.isna().any(axis=1).to_numpy()
        codes[nan_rows] = -1
    else:
        codes = np.zeros(nh + nf, dtype=np.int64)
    hc, fc = codes[:nh], codes[nh:]
    hday = _day_number(hist["completion_date"])
    fday = _day_number(cutoff)
    base = np.int64(max(hday.max(initial=0), fday.max(initial=0)) + 2)
    off = min(hday.min(initial=0), fday.min(initial=0))
    hday, fday = hday - off, fday - off

    order = np.lexsort((hist["facility_id"].to_numpy(), hist["study_id"].to_numpy(), hday, hc))
    h = hist.iloc[order]
    hc_s, combined = hc[order], hc[order] * base + hday[order]
    grp = pd.Series(hc_s)
    out = pd.DataFrame(index=focal.index)
    pos = np.searchsorted(combined, fc * base + fday, side="left")
    start = np.searchsorted(combined, fc * base, side="left")
    n = np.where(fc >= 0, pos - start, 0)
    last = np.maximum(pos - 1, 0)
    out["count"] = n
    for v in values:
        cum = pd.Series(h[v].to_numpy(dtype=np.float64)).groupby(grp.to_numpy()).cumsum().to_numpy()
        out[v] = np.where(n > 0, cum[last] if nh else 0.0, 0.0)
    return out


def compute_group_history_feature(history: pd.DataFrame, spec: GroupingSpec,
                                  focal: pd.DataFrame, cutoff: pd.Series) -> np.ndarray:
    """Historical metric for each focal study-site row (NaN when no history).

    ``focal`` carries the grouping columns; ``cutoff`` the focal study's eCRF
    finalization date per row.
    """
    keys = [KEY_COLUMNS[k] for k in spec.keys]
    if spec.metric == "rate":
        s = _cutoff_sums(history, keys, focal, cutoff, ["rate"])
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(s["count"] > 0, s["rate"] / s["count"], np.nan)
    s = _cutoff_sums(history, keys, focal, cutoff, ["total", "n_months"])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s["count"] > 0, s["total"] / s["n_months"], np.nan)


def compute_history_count(history, keys, focal, cutoff) -> np.ndarray:
    return _cutoff_sums(history, [KEY_COLUMNS[k] for k in keys], focal, cutoff, [])["count"].to_numpy()


def compute_prevalence_features(history: pd.DataFrame, focal: pd.DataFrame,
                                cutoff: pd.Series) -> pd.DataFrame:
    """Share of historical patients enrolled in the focal indication, globally
    and within the focal site's country."""
    out = pd.DataFrame(index=focal.index)
    for name, num_keys, den_keys in (("prev_global", ["indication"], []),
                                     ("prev_country", ["country", "indication"], ["country"])):
        num = _cutoff_sums(history, num_keys, focal, cutoff, ["total"])["total"]
        den = _cutoff_sums(history, den_keys, focal, cutoff, ["total"])["total"]
        with np.errstate(invalid="ignore", divide="ignore"):
            out[name] = np.where(den > 0, num / den, np.nan)
    return out


def compute_time_features(month_index, creation_date) -> dict:
    """month_index, calendar_month and days_in_month for one panel row."""
    ords = month_ordinal([creation_date])[0] + int(month_index)
    return {
        "month_index": int(month_index),
        "calendar_month": int(ords % 12 + 1),
        "days_in_month": int(days_in_month(ords)[0]),
    }


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

_NON_FEATURE_SITE_COLUMNS = {"study_id", "facility_id", "country", "creation_date"}


def _site_frame(cohort: Cohort) -> pd.DataFrame:
    st = cohort.studies.set_index("study_id")
    s = cohort.sites.copy()
    for c in ("ta", "indication_group", "indication", "phase", "ecrf_date"):
        s[c] = s["study_id"].map(st[c])
    return s


def assemble_design_matrix(cohort: Cohort, panel: SiteMonthPanel,
                           config: FeatureConfig | None = None,
                           rows: pd.DataFrame | None = None) -> FeatureMatrix:
    """Join study, country, site and site-month features onto panel rows.

    ``rows`` defaults to the panel's rows; pass an extended grid (same key
    and calendar columns) to featurise months beyond the observed span.
    History comes from the whole cohort with the per-study date cutoff
    always enforced.
    """
    config = config or FeatureConfig()
    rows = panel.frame if rows is None else rows
    history = site_history_table(cohort, panel)

    sites = _site_frame(cohort)
    key = ["study_id", "facility_id"]
    missing = (pd.MultiIndex.from_frame(rows[key].drop_duplicates())
               .difference(pd.MultiIndex.from_frame(sites[key])))
    if len(missing):
        raise DataError(f"panel rows reference unknown study-site {missing[0]}")
    sites = sites.set_index(key).loc[pd.MultiIndex.from_frame(rows[key].drop_duplicates())].reset_index()
    cutoff = sites["ecrf_date"]
    cols: dict[str, np.ndarray] = {}
    meta: dict[str, ColumnMeta] = {}

    def add(name, values, level, kind):
        cols[name] = values
        meta[name] = ColumnMeta(level, kind)

    st = cohort.studies.set_index("study_id")
    sid = sites["study_id"]
    # study level
    for c in ("phase", "ta", "indication_group", "indication", "gender"):
        add(c, sid.map(st[c]).to_numpy(object), "study", "categorical")
    if config.include_sponsor:
        add("sponsor_id", sid.map(st["sponsor_id"]).to_numpy(object), "study", "categorical")
    for c in ("target_enrollment", "num_arms", "min_age", "max_age"):
        add(c, sid.map(st[c]).to_numpy(np.float64), "study", "numeric")
    all_sites = cohort.sites
    add("n_sites", sid.map(all_sites.groupby("study_id").size()).to_numpy(np.float64), "study", "numeric")
    add("n_countries", sid.map(all_sites.groupby("study_id")["country"].nunique()).to_numpy(np.float64),
        "study", "numeric")
    add("ecrf_year", (pd.DatetimeIndex(sid.map(st["ecrf_date"])).year
                      + pd.DatetimeIndex(sid.map(st["ecrf_date"])).dayofyear / 366.0).to_numpy(np.float64),
        "study", "numeric")
    # country level
    add("country", sites["country"].to_numpy(object), "country", "categorical")
    per_country = all_sites.groupby(["study_id", "country"]).size()
    add("n_sites_country", per_country.reindex(pd.MultiIndex.from_frame(sites[["study_id", "country"]]))
        .to_numpy(np.float64), "country", "numeric")
    # site level
    offset = month_ordinal(sites["creation_date"]) - month_ordinal(cutoff)
    add("creation_offset_months", offset.astype(np.float64), "site", "numeric")
    add("hist_n__facility", compute_history_count(history, ["facility"], sites, cutoff)
        .astype(np.float64), "site", "history")
    for c in cohort.sites.columns:
        if c not in _NON_FEATURE_SITE_COLUMNS:
            add(c, pd.to_numeric(sites[c], errors="coerce").to_numpy(np.float64), "site", "numeric")
    for spec in config.history_specs:
        add(spec.name, compute_group_history_feature(history, spec, sites, cutoff), spec.level, "history")
    if config.prevalence:
        prev = compute_prevalence_features(history, sites, cutoff)
        add("prev_global", prev["prev_global"].to_numpy(), "study", "history")
        add("prev_country", prev["prev_country"].to_numpy(), "country", "history")

    site_df = pd.DataFrame(cols)
    site_df[key] = sites[key].to_numpy()
    merged = rows[key + ["month_index", "calendar_month", "days_in_month"]].merge(
        site_df, on=key, how="left", validate="many_to_one")
    data = merged[list(cols)].copy()
    # site-month level
    data["month_index"] = merged["month_index"].to_numpy(np.float64)
    data["calendar_month"] = merged["calendar_month"].astype(str).to_numpy(object)
    data["days_in_month"] = merged["days_in_month"].to_numpy(np.float64)
    meta["month_index"] = ColumnMeta("site-month", "numeric")
    meta["calendar_month"] = ColumnMeta("site-month", "categorical")
    meta["days_in_month"] = ColumnMeta("site-month", "numeric")
    for c, m in meta.items():
        if m.categorical:
            data[c] = data[c].where(pd.notna(data[c]), None)
    for ladder in config.ladders:
        for i, r in enumerate(ladder.rungs):
            if r in meta and meta[r].ladder_rung is None:
                meta[r] = ColumnMeta(meta[r].level, meta[r].kind, i)
    keys = merged[["study_id", "facility_id", "month_index"]].reset_index(drop=True)
    if keys.duplicated().any():
        raise DataError("duplicate (study_id, facility_id, month_index) rows")
    return FeatureMatrix(keys, data.reset_index(drop=True), meta)


def hierarchical_impute(matrix: FeatureMatrix, ladder: ImputationLadder) -> FeatureMatrix:
    """Fill each rung from the first non-missing coarser rung.

    Non-missing values are never changed. ``imputation[rung]`` records, per
    row, the index of the rung that supplied the value (-1 if none did).
    """
    unknown = [r for r in ladder.rungs if r not in matrix.meta]
    if unknown:
        raise DataError(f"ladder references unknown column(s) {unknown}")
    data = matrix.data.copy()
    imputation = dict(matrix.imputation)
    original = {r: matrix.data[r].to_numpy(np.float64) for r in ladder.rungs}
    for i, target in enumerate(ladder.rungs):
        values = original[target].copy()
        source = np.where(np.isnan(values), -1, i)
        for j in range(i + 1, len(ladder.rungs)):
            fill = np.isnan(values) & ~np.isnan(original[ladder.rungs[j]])
            values[fill] = original[ladder.rungs[j]][fill]
            source[fill] = j
        data[target] = values
        prev = imputation.get(target)
        imputation[target] = source if prev is None else np.where(prev == -1, source, prev)
    return FeatureMatrix(matrix.keys, data, dict(matrix.meta), imputation)


def impute_all(matrix: FeatureMatrix, ladders) -> FeatureMatrix:
    for ladder in ladders:
        if all(r in matrix.meta for r in ladder.rungs):
            matrix = hierarchical_impute(matrix, ladder)
    return matrix


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    winsor_percentile: float = 97.5
    corr_threshold: float = 0.9
    min_category_studies: int = 50
    glm: bool = False
    sparse_threshold: float = 0.99
    corr_min_periods: int = 30


@dataclass
class PrepParams:
    """Everything needed to replay preprocessing on new rows."""

    glm: bool
    input_schema: str
    winsor: dict[str, float] = field(default_factory=dict)
    dropped_corr: list[str] = field(default_factory=list)
    categories: dict[str, list[str]] = field(default_factory=dict)
    onehot: dict[str, list[str]] = field(default_factory=dict)
    dropped_sparse: list[str] = field(default_factory=list)
    center: dict[str, float] = field(default_factory=dict)
    scale: dict[str, float] = field(default_factory=dict)
    median: dict[str, float] = field(default_factory=dict)
    output_columns: list[str] = field(default_factory=list)
    output_levels: dict[str, str] = field(default_factory=dict)

    def write(self, path) -> None:
        rows = [("meta", "", "glm", str(int(self.glm))), ("meta", "", "input_schema", self.input_schema)]
        rows += [("winsor", c, "upper", repr(v)) for c, v in self.winsor.items()]
        rows += [("drop_corr", c, "", "") for c in self.dropped_corr]
        rows += [("category", c, str(i), lv) for c, lvls in self.categories.items()
                 for i, lv in enumerate(lvls)]
        rows += [("onehot", c, str(i), lv) for c, lvls in self.onehot.items() for i, lv in enumerate(lvls)]
        rows += [("drop_sparse", c, "", "") for c in self.dropped_sparse]
        rows += [("center", c, "", repr(v)) for c, v in self.center.items()]
        rows += [("scale", c, "", repr(v)) for c, v in self.scale.items()]
        rows += [("median", c, "", repr(v)) for c, v in self.median.items()]
        rows += [("output", c, self.output_levels[c], str(i)) for i, c in enumerate(self.output_columns)]
        pd.DataFrame(rows, columns=["step", "column", "key", "value"]).to_csv(
            path, index=False, lineterminator="\n")

    @classmethod
    def read(cls, path) -> "PrepParams":
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        meta = {r.key: r.value for r in df[df.step == "meta"].itertuples()}
        p = cls(glm=meta["glm"] == "1", input_schema=meta["input_schema"])
        for r in df.itertuples(index=False):
            if r.step == "winsor":
                p.winsor[r.column] = float(r.value)
            elif r.step == "drop_corr":
                p.dropped_corr.append(r.column)
            elif r.step == "category":
                p.categories.setdefault(r.column, []).append(r.value)
            elif r.step == "onehot":
                p.onehot.setdefault(r.column, []).append(r.value)
            elif r.step == "drop_sparse":
                p.dropped_sparse.append(r.column)
            elif r.step in ("center", "scale", "median"):
                getattr(p, r.step)[r.column] = float(r.value)
            elif r.step == "output":
                p.output_columns.append(r.column)
                p.output_levels[r.column] = r.key
        return p


def winsor_upper(values: np.ndarray, percentile: float) -> float:
    """Upper winsorization bound (inverse-CDF interpolation: 97.5 on 1..100 -> 97.5)."""
    v = values[~np.isnan(values)]
    if v.size == 0:
        return np.nan
    return float(np.percentile(v, percentile, method="interpolated_inverted_cdf"))


def _pool(values: pd.Series, kept: list[str]) -> pd.Series:
    keep = set(kept)
    return values.map(lambda v: v if v is None or v in keep else OTHER)


def fit_preprocess(matrix: FeatureMatrix, cfg: PreprocessConfig, train_mask=None) -> PrepParams:
    train_mask = np.ones(len(matrix), bool) if train_mask is None else np.asarray(train_mask)
    data = matrix.data[train_mask]
    studies = matrix.keys["study_id"][train_mask]
    params = PrepParams(glm=cfg.glm, input_schema=matrix.schema_hash())
    meta = matrix.meta

    work = {}
    for c in matrix.columns:
        if meta[c].categorical:
            continue
        x = data[c].to_numpy(np.float64)
        if meta[c].kind == "history":
            params.winsor[c] = winsor_upper(x, cfg.winsor_percentile)
            if not np.isnan(params.winsor[c]):
                x = np.minimum(x, params.winsor[c])
        work[c] = x

    protected = [c for c in work if meta[c].level == "site-month"]
    candidates = protected + [c for c in work if meta[c].level != "site-month"]
    corr = pd.DataFrame(work)[candidates].corr(min_periods=cfg.corr_min_periods).abs().to_numpy()
    kept_idx: list[int] = []
    for i, c in enumerate(candidates):
        if c in protected or not any(corr[i, j] > cfg.corr_threshold for j in kept_idx):
            kept_idx.append(i)
        else:
            params.dropped_corr.append(c)
    dropped = set(params.dropped_corr)

    for c in matrix.columns:
        if meta[c].categorical:
            per_level = pd.DataFrame({"v": data[c].to_numpy(), "s": studies.to_numpy()}).dropna()
            n_studies = per_level.groupby("v")["s"].nunique()
            kept = sorted(n_studies.index[n_studies >= cfg.min_category_studies])
            # OTHER is always a level so unseen test categories have a home
            params.categories[c] = [lv for lv in kept if lv != OTHER] + [OTHER]

    out: dict[str, np.ndarray] = {}
    levels: dict[str, str] = {}
    for c in matrix.columns:
        if c in dropped:
            continue
        if meta[c].categorical:
            pooled = _pool(data[c], params.categories[c])
            if cfg.glm:
                present = sorted(set(pooled.dropna()))
                params.onehot[c] = present[1:]  # first level is the reference
                for lv in params.onehot[c]:
                    out[f"{c}={lv}"] = (pooled == lv).to_numpy(np.float64)
                    levels[f"{c}={lv}"] = meta[c].level
            else:
                out[c] = _codes(pooled, params.categories[c])
                levels[c] = meta[c].level
        else:
            out[c] = work[c]
            levels[c] = meta[c].level

    if cfg.glm:
        for c in list(out):
            x = out[c]
            ok = x[~np.isnan(x)]
            if ok.size == 0:
                params.dropped_sparse.append(c)
                del out[c]
                continue
            _, counts = np.unique(ok, return_counts=True)
            if counts.max() / x.size > cfg.sparse_threshold and levels[c] != "site-month":
                params.dropped_sparse.append(c)
                del out[c]
                continue
            sd = ok.std()
            if not sd > 0:
                warnings.warn(f"dropping zero-variance column {c}", RuntimeWarning, stacklevel=2)
                logger.warning("dropping zero-variance column %s", c)
                params.dropped_sparse.append(c)
                del out[c]
                continue
            params.center[c] = float(ok.mean())
            params.scale[c] = float(sd)
            z = (x - params.center[c]) / params.scale[c]
            params.median[c] = float(np.median(z[~np.isnan(z)]))
    params.output_columns = list(out)
    params.output_levels = {c: levels[c] for c in out}
    return params


def _codes(values: pd.Series, levels: list[str]) -> np.ndarray:
    lookup = {lv: float(i) for i, lv in enumerate(levels)}
    return values.map(lambda v: np.nan if v is None else lookup.get(v, lookup.get(OTHER, np.nan))
                      ).to_numpy(np.float64)


def apply_preprocess(matrix: FeatureMatrix, params: PrepParams) -> FeatureMatrix:
    """Replay fitted preprocessing; returns an all-numeric matrix."""
    if matrix.schema_hash() != params.input_schema:
        raise DataError("feature schema differs from the one preprocessing was fitted on")
    meta = matrix.meta
    out: dict[str, np.ndarray] = {}
    dropped = set(params.dropped_corr)
    for c in matrix.columns:
        if c in dropped:
            continue
        if meta[c].categorical:
            pooled = _pool(matrix.data[c], params.categories[c])
            if params.glm:
                for lv in params.onehot.get(c, []):
                    out[f"{c}={lv}"] = (pooled == lv).to_numpy(np.float64)
            else:
                out[c] = _codes(pooled, params.categories[c])
        else:
            x = matrix.data[c].to_numpy(np.float64)
            if c in params.winsor and not np.isnan(params.winsor[c]):
                x = np.minimum(x, params.winsor[c])
            out[c] = x
    if params.glm:
        for c in params.output_columns:
            z = (out[c] - params.center[c]) / params.scale[c]
            out[c] = np.where(np.isnan(z), params.median[c], z)
    data = pd.DataFrame({c: out[c] for c in params.output_columns})
    new_meta = {c: ColumnMeta(params.output_levels[c], "numeric") for c in params.output_columns}
    return FeatureMatrix(matrix.keys, data, new_meta)


def preprocess(matrix: FeatureMatrix, cfg: PreprocessConfig | None = None,
               train_mask=None) -> tuple[FeatureMatrix, PrepParams]:
    """Winsorize history columns, drop correlated columns, pool rare
    categories and, for GLM consumers, one-hot/sparse-drop/standardize/impute.

    Parameters are fitted on ``train_mask`` rows and returned for replay.
    """
    cfg = cfg or PreprocessConfig()
    params = fit_preprocess(matrix, cfg, train_mask)
    return apply_preprocess(matrix, params), params
