"""Synthetic cohorts with known ground truth.

Sites enroll from a zero-inflated, seasonal, heterogeneous-rate Poisson
process. Each site-month count is Poisson with mean

    site_rate * (1 + amplitude * sin(2*pi*calendar_month / 12)) * country_multiplier

or exactly zero for structural-zero sites. ``site_rate`` bundles the
indication base rate, a phase multiplier, a calendar drift, a persistent
facility multiplier (shared by every study the facility joins) and a
study-site Gamma draw with mean one.
"""
from __future__ import annotations

import configparser
import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError
from .trialdata import Cohort, days_in_month, month_ordinal, write_cohort

logger = logging.getLogger(__name__)

MAX_STUDY_MONTHS = 120

DEFAULT_TA_CATALOG = (
    ("oncology", "solid_tumor", "breast_cancer", 0.11),
    ("oncology", "solid_tumor", "lung_cancer", 0.14),
    ("oncology", "hematologic", "lymphoma", 0.085),
    ("cardiovascular", "heart_failure", "chronic_heart_failure", 0.28),
    ("cardiovascular", "vascular", "hypertension", 0.42),
    ("endocrinology", "diabetes", "type2_diabetes", 0.385),
    ("neurology", "neurodegenerative", "alzheimers", 0.175),
    ("dermatology", "inflammatory_skin", "psoriasis", 0.49),
)
DEFAULT_COUNTRY_CATALOG = (
    ("US", 1.0, 0.40),
    ("DE", 0.9, 0.12),
    ("ES", 1.3, 0.10),
    ("PL", 1.6, 0.10),
    ("GB", 0.8, 0.10),
    ("JP", 0.6, 0.08),
    ("CN", 1.8, 0.10),
)
DEFAULT_PHASE_MULTIPLIERS = (("I", 0.6), ("II", 0.9), ("III", 1.3), ("IV", 1.0))
DEFAULT_PHASE_WEIGHTS = (("I", 0.12), ("II", 0.30), ("III", 0.43), ("IV", 0.15))


@dataclass(frozen=True)
class GeneratorConfig:
    n_studies: int = 300
    sites_per_study: tuple[int, int] = (4, 30)
    ta_catalog: tuple = DEFAULT_TA_CATALOG
    zero_inflation: float = 0.08
    site_rate_shape: float = 3.0
    seasonal_amplitude: float = 0.25
    country_catalog: tuple = DEFAULT_COUNTRY_CATALOG
    activation_stagger_months: tuple[int, int] = (0, 8)
    rng_seed: int = 0
    # knobs beyond the core process
    phase_multipliers: tuple = DEFAULT_PHASE_MULTIPLIERS
    phase_weights: tuple = DEFAULT_PHASE_WEIGHTS
    facility_pool_size: int = 600
    facility_rate_shape: float = 3.0
    planned_duration_months: tuple[int, int] = (8, 30)
    target_noise_sd: float = 0.3
    start_year: int = 2008
    end_year: int = 2019
    rate_drift_per_year: float = 0.0
    excluded_type_rate: float = 0.0
    n_sponsors: int = 60

    def __post_init__(self):
        validate_generator_config(self)


def validate_generator_config(cfg: GeneratorConfig) -> None:
    def need(ok, key, msg):
        if not ok:
            raise ConfigError(f"generator.{key}: {msg}")

    need(cfg.n_studies >= 1, "n_studies", "must be a positive integer")
    lo, hi = cfg.sites_per_study
    need(1 <= lo <= hi, "sites_per_study", "need 1 <= min <= max")
    lo, hi = cfg.activation_stagger_months
    need(0 <= lo <= hi, "activation_stagger_months", "need 0 <= min <= max")
    lo, hi = cfg.planned_duration_months
    need(1 <= lo <= hi, "planned_duration_months", "need 1 <= min <= max")
    need(0.0 <= cfg.zero_inflation <= 1.0, "zero_inflation", "must lie in [0, 1]")
    need(0.0 <= cfg.seasonal_amplitude < 1.0, "seasonal_amplitude", "must lie in [0, 1)")
    need(cfg.site_rate_shape > 0, "site_rate_shape", "must be > 0")
    need(cfg.facility_rate_shape >= 0, "facility_rate_shape", "must be >= 0 (0 disables)")
    need(len(cfg.ta_catalog) > 0, "ta_catalog", "must be non-empty")
    need(all(e[3] > 0 for e in cfg.ta_catalog), "ta_catalog", "base rates must be > 0")
    need(len(cfg.country_catalog) > 0, "country_catalog", "must be non-empty")
    need(all(e[1] > 0 for e in cfg.country_catalog), "country_catalog",
         "rate multipliers must be > 0")
    need(0.0 <= cfg.excluded_type_rate <= 1.0, "excluded_type_rate", "must lie in [0, 1]")
    need(cfg.start_year <= cfg.end_year, "start_year", "must not exceed end_year")
    need(cfg.facility_pool_size >= 1, "facility_pool_size", "must be positive")


def seasonal_multiplier(calendar_month, amplitude: float):
    return 1.0 + amplitude * np.sin(2.0 * np.pi * np.asarray(calendar_month) / 12.0)


@dataclass
class GroundTruth:
    """Generative parameters for every study-site.

    ``sites`` columns: study_id, facility_id, creation_ord, is_structural_zero,
    site_rate, country_multiplier, end_ord. ``capped`` lists studies that hit
    the month cap before reaching their target.
    """

    sites: pd.DataFrame
    seasonal_amplitude: float
    capped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = self.sites.set_index(["study_id", "facility_id"])

    def expected(self, study_ids, facility_ids, month_index) -> np.ndarray:
        """Vectorised generative expectation for (study, facility, month_index) rows."""
        key = pd.MultiIndex.from_arrays([np.asarray(study_ids), np.asarray(facility_ids)])
        rows = self._index.reindex(key)
        if rows["site_rate"].isna().any():
            bad = key[rows["site_rate"].isna().to_numpy()][0]
            raise KeyError(f"unknown study-site {bad}")
        cal = (rows["creation_ord"].to_numpy(np.int64) + np.asarray(month_index)) % 12 + 1
        mu = (rows["site_rate"].to_numpy() * rows["country_multiplier"].to_numpy()
              * seasonal_multiplier(cal, self.seasonal_amplitude))
        return np.where(rows["is_structural_zero"].to_numpy(bool), 0.0, mu)

    def frame(self) -> pd.DataFrame:
        """Per site-month truth over each site's observed span (``truth.csv`` rows)."""
        s = self.sites
        n = np.maximum(s["end_ord"].to_numpy() - s["creation_ord"].to_numpy() + 1, 1)
        rep = np.repeat(np.arange(len(s)), n)
        mi = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        out = pd.DataFrame({
            "study_id": s["study_id"].to_numpy()[rep],
            "facility_id": s["facility_id"].to_numpy()[rep],
            "month_index": mi,
        })
        out["expected_count"] = self.expected(out["study_id"], out["facility_id"], mi)
        out["is_structural_zero"] = s["is_structural_zero"].to_numpy()[rep].astype(int)
        out["site_rate"] = s["site_rate"].to_numpy()[rep]
        return out


def oracle_expected_count(truth: GroundTruth, study_id: str, facility_id: str,
                          month_index: int) -> float:
    return float(truth.expected([study_id], [facility_id], [month_index])[0])


def _choice(rng, items, weights=None):
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        return items[int(rng.choice(len(items), p=w / w.sum()))]
    return items[int(rng.integers(len(items)))]


def _random_date(rng, start_year, end_year) -> pd.Timestamp:
    start = pd.Timestamp(f"{start_year}-01-01")
    span = (pd.Timestamp(f"{end_year}-12-31") - start).days
    return start + pd.Timedelta(days=int(rng.integers(span + 1)))


def _facility_pool(cfg: GeneratorConfig, rng) -> pd.DataFrame:
    countries = [c[0] for c in cfg.country_catalog]
    mult = {c[0]: c[1] for c in cfg.country_catalog}
    weights = np.array([c[2] if len(c) > 2 else 1.0 for c in cfg.country_catalog], float)
    idx = rng.choice(len(countries), size=cfg.facility_pool_size, p=weights / weights.sum())
    if cfg.facility_rate_shape > 0:
        k = cfg.facility_rate_shape
        quality = rng.gamma(k, 1.0 / k, size=cfg.facility_pool_size)
    else:
        quality = np.ones(cfg.facility_pool_size)
    pool = pd.DataFrame({
        "facility_id": [f"F{i:05d}" for i in range(cfg.facility_pool_size)],
        "country": [countries[i] for i in idx],
        "quality": quality,
    })
    pool["country_multiplier"] = pool["country"].map(mult)
    return pool


def _simulate_study(cfg: GeneratorConfig, ordinal: int, rng, pool: pd.DataFrame):
    study_id = f"S{ordinal:05d}"
    ta, group, indication, base_rate = _choice(rng, cfg.ta_catalog)
    phases = [p for p, _ in cfg.phase_weights]
    phase = _choice(rng, phases, [w for _, w in cfg.phase_weights])
    phase_mult = dict(cfg.phase_multipliers).get(phase, 1.0)
    ecrf = _random_date(rng, cfg.start_year, cfg.end_year)
    years = (ecrf - pd.Timestamp(f"{cfg.start_year}-01-01")).days / 365.25
    drift = float(np.exp(cfg.rate_drift_per_year * years))
    num_arms = int(rng.integers(1, 5))
    min_age = float(rng.choice([18, 18, 18, 21, 40]))
    max_age = float(rng.choice([65, 75, 80, 99]))
    gender = _choice(rng, ["all", "all", "all", "female", "male"])
    study_type = "interventional"
    if rng.random() < cfg.excluded_type_rate:
        study_type = _choice(rng, ["pediatric", "observational", "device"])
    sponsor = f"SP{int(rng.integers(cfg.n_sponsors)):03d}"
    cro = f"CRO{int(rng.integers(20)):02d}" if rng.random() < 0.5 else None

    lo, hi = cfg.sites_per_study
    n_sites = int(min(rng.integers(lo, hi + 1), len(pool)))
    chosen = np.sort(rng.choice(len(pool), size=n_sites, replace=False))
    fac = pool.iloc[chosen].reset_index(drop=True)

    slo, shi = cfg.activation_stagger_months
    stagger = rng.integers(slo, shi + 1, size=n_sites)
    day_jitter = rng.integers(0, 28, size=n_sites)
    creation = [ecrf + pd.DateOffset(months=int(m)) + pd.Timedelta(days=int(d))
                for m, d in zip(stagger, day_jitter)]
    creation = pd.DatetimeIndex(creation)

    k = cfg.site_rate_shape
    design_rate = base_rate * phase_mult * drift
    site_rate = design_rate * fac["quality"].to_numpy() * rng.gamma(k, 1.0 / k, size=n_sites)
    structural = rng.random(n_sites) < cfg.zero_inflation
    cmult = fac["country_multiplier"].to_numpy()

    plo, phi_ = cfg.planned_duration_months
    planned = int(rng.integers(plo, phi_ + 1))
    expected_total = (design_rate * cmult * (1 - cfg.zero_inflation)).sum() * planned
    target = max(1, int(round(expected_total * np.exp(rng.normal(0.0, cfg.target_noise_sd)))))

    c_ord = month_ordinal(creation)
    first = int(c_ord.min())
    months = first + np.arange(MAX_STUDY_MONTHS)
    cal = months % 12 + 1
    mu = (site_rate * cmult)[:, None] * seasonal_multiplier(cal, cfg.seasonal_amplitude)[None, :]
    mu[structural, :] = 0.0
    mu[months[None, :] < c_ord[:, None]] = 0.0
    counts = rng.poisson(mu)
    monthly = counts.sum(axis=0)
    cum = np.cumsum(monthly)
    hit = np.flatnonzero(cum >= target)
    capped = hit.size == 0
    stop = int(hit[0]) if not capped else MAX_STUDY_MONTHS - 1
    counts = counts[:, :stop + 1]

    # enrollment dates; creation month starts at the creation day
    dim = days_in_month(months[:stop + 1])
    ev_site, ev_date = [], []
    for j in range(stop + 1):
        col = counts[:, j]
        if not col.any():
            continue
        y, m = divmod(int(months[j]), 12)
        for s in np.flatnonzero(col):
            lo_day = creation[s].day if c_ord[s] == months[j] else 1
            days = np.sort(rng.integers(lo_day, dim[j] + 1, size=int(col[s])))
            for d in days:
                ev_site.append(s)
                ev_date.append(pd.Timestamp(year=y, month=m + 1, day=int(d)))
    events = pd.DataFrame({"site": ev_site, "enrollment_date": ev_date})
    if not capped and len(events) > target:
        # enrollment closes once the target is met within the final month
        events = events.sort_values(["enrollment_date", "site"], kind="mergesort")
        events = events.iloc[:target]
    events = events.sort_values(["enrollment_date", "site"], kind="mergesort").reset_index(drop=True)
    end_ord = int(month_ordinal(events["enrollment_date"]).max()) if len(events) else int(months[stop])

    study = {
        "study_id": study_id, "ecrf_date": ecrf, "ta": ta, "indication_group": group,
        "indication": indication, "phase": phase, "sponsor_id": sponsor, "cro_id": cro,
        "target_enrollment": target, "num_arms": num_arms, "min_age": min_age,
        "max_age": max_age, "gender": gender, "study_type": study_type,
    }
    sites = pd.DataFrame({
        "study_id": study_id,
        "facility_id": fac["facility_id"].to_numpy(),
        "country": fac["country"].to_numpy(),
        "creation_date": creation,
    })
    ev = pd.DataFrame({
        "study_id": study_id,
        "facility_id": fac["facility_id"].to_numpy()[events["site"].to_numpy(int)],
        "patient_id": [f"{study_id}-P{i:05d}" for i in range(len(events))],
        "enrollment_date": pd.DatetimeIndex(events["enrollment_date"]),
    })
    truth = pd.DataFrame({
        "study_id": study_id,
        "facility_id": fac["facility_id"].to_numpy(),
        "creation_ord": c_ord,
        "is_structural_zero": structural,
        "site_rate": site_rate,
        "country_multiplier": cmult,
        "end_ord": end_ord,
    })
    return study, sites, ev, truth, capped


def generate_cohort(config: GeneratorConfig) -> tuple[Cohort, GroundTruth]:
    """Draw a synthetic cohort; fully deterministic given ``config.rng_seed``.

    Each study draws from its own stream spawned from the seed, so studies
    could be generated independently and merged in study order.
    """
    seq = np.random.SeedSequence(config.rng_seed)
    pool_seq, *study_seqs = seq.spawn(config.n_studies + 1)
    pool = _facility_pool(config, np.random.default_rng(pool_seq))
    studies, sites, events, truths, capped = [], [], [], [], []
    for i, ss in enumerate(study_seqs):
        st, si, ev, tr, cap = _simulate_study(config, i, np.random.default_rng(ss), pool)
        studies.append(st)
        sites.append(si)
        events.append(ev)
        truths.append(tr)
        if cap:
            capped.append(st["study_id"])
    if capped:
        logger.warning("%d studies hit the %d-month cap before reaching target",
                       len(capped), MAX_STUDY_MONTHS)
    st = pd.DataFrame(studies)
    st["num_arms"] = st["num_arms"].astype(float)
    cohort = Cohort(
        studies=st,
        sites=pd.concat(sites, ignore_index=True),
        events=pd.concat(events, ignore_index=True),
    )
    truth = GroundTruth(pd.concat(truths, ignore_index=True), config.seasonal_amplitude, capped)
    return cohort, truth


def write_truth(truth: GroundTruth, path) -> None:
    f = truth.frame()
    f.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def write_generated(cohort: Cohort, truth: GroundTruth, directory) -> dict[str, Path]:
    paths = write_cohort(cohort, directory)
    paths["truth"] = Path(directory) / "truth.csv"
    write_truth(truth, paths["truth"])
    return paths


# ---------------------------------------------------------------------------
# flat key-value configuration
# ---------------------------------------------------------------------------

def _parse_catalog(text: str, arity: tuple[int, ...], numeric_from: int):
    entries = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(":")]
        if len(parts) not in arity:
            raise ValueError(f"bad catalog entry {chunk!r}")
        entries.append(tuple(parts[:numeric_from]) + tuple(float(p) for p in parts[numeric_from:]))
    return tuple(entries)


def _parse_range(text: str) -> tuple[int, int]:
    parts = re.split(r"\s*[-,]\s*", text.strip())
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"bad range {text!r}, expected 'min-max'")
    return int(parts[0]), int(parts[1])


_FIELD_PARSERS = {
    "sites_per_study": _parse_range,
    "activation_stagger_months": _parse_range,
    "planned_duration_months": _parse_range,
    # therapeutic_area:indication_group:indication:base_rate
    "ta_catalog": lambda s: _parse_catalog(s, (4,), 3),
    # country:rate_multiplier[:weight]
    "country_catalog": lambda s: _parse_catalog(s, (2, 3), 1),
    "phase_multipliers": lambda s: _parse_catalog(s, (2,), 1),
    "phase_weights": lambda s: _parse_catalog(s, (2,), 1),
}


def generator_config_from_mapping(values: dict[str, str], prefix: str = "generator") -> GeneratorConfig:
    """Build a config from flat string key/values; unknown keys are rejected."""
    known = {f.name: f for f in fields(GeneratorConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {prefix}.{key}")
        default = getattr(GeneratorConfig, key, None)
        try:
            if key in _FIELD_PARSERS:
                kwargs[key] = _FIELD_PARSERS[key](raw)
            elif isinstance(default, bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"{prefix}.{key}: cannot parse {raw!r} ({exc})") from exc
    return GeneratorConfig(**kwargs)


def load_generator_config(path) -> GeneratorConfig:
    """Read a flat ``key = value`` file (optionally under a ``[generator]`` header)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    parser.optionxform = str
    try:
        if not text.lstrip().startswith("["):
            text = "[generator]\n" + text
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return generator_config_from_mapping(dict(parser["generator"]) if parser.has_section("generator") else {})


def with_seed(cfg: GeneratorConfig, seed: int) -> GeneratorConfig:
    return replace(cfg, rng_seed=seed)
