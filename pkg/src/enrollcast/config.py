"""Run configuration: a flat-section INI file.

Every key has a typed default; unknown sections or keys, duplicate keys,
unparseable values and out-of-range values raise ``ConfigError`` naming the
offending ``section.key``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .features import FeatureConfig, PreprocessConfig
from .models.gbt import GBTParams
from .pipeline import MODEL_NAMES, ModelSpec
from .syncohort import GeneratorConfig, generator_config_from_mapping, validate_generator_config
from .trialdata import DEFAULT_SITE_SLACK_MONTHS, FilterConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.replace(";", ",").split(",") if v.strip())


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 0  # 0: all available cores


@dataclass(frozen=True)
class PathsSection:
    data_dir: str = "data"
    work_dir: str = "work"
    report_dir: str = "reports"


@dataclass(frozen=True)
class FeaturesSection:
    winsor_percentile: float = 97.5
    corr_threshold: float = 0.9
    min_category_studies: int = 50
    sparse_threshold: float = 0.99
    include_sponsor: bool = True
    prevalence: bool = True
    site_slack_months: int = DEFAULT_SITE_SLACK_MONTHS
    min_duration_months: int = 4
    bulk_month_share: float = 0.9


@dataclass(frozen=True)
class ModelSection:
    family: str = "gbt_tweedie"
    tweedie_p: float = 1.5
    n_rounds: int = 500
    learning_rate: float = 0.1
    max_depth: int = 6
    lambda_reg: float = 1.0
    min_child_weight: float = 1e-3
    min_samples_leaf: int = 20
    max_bins: int = 256
    subsample: float = 1.0
    colsample: float = 1.0
    zip_tol: float = 1e-6
    zip_max_iter: int = 200
    glm_subsample: float = 1.0
    glm_log_history: bool = True


@dataclass(frozen=True)
class EvalSection:
    split: str = "random"
    holdout_fraction: float = 0.25
    folds: int = 5
    models: tuple[str, ...] = ("hist_rate", "gbt_rate", "gbt_tweedie", "zip")
    start_quarter: str = ""
    end_quarter: str = ""


@dataclass(frozen=True)
class IntervalsSection:
    n_sims: int = 1000
    levels: tuple[float, ...] = (0.5, 0.8, 0.9)
    dispersion_scale: float = 1.0


_RANGES = {
    "run.threads": (0, None, "[0, inf)"),
    "features.winsor_percentile": (50.0, 100.0, "[50, 100]"),
    "features.corr_threshold": (0.0, 1.0, "[0, 1]"),
    "features.min_category_studies": (1, None, "[1, inf)"),
    "features.sparse_threshold": (0.0, 1.0, "[0, 1]"),
    "features.min_duration_months": (1, None, "[1, inf)"),
    "features.bulk_month_share": (0.0, 1.0, "[0, 1]"),
    "model.n_rounds": (0, None, "[0, inf)"),
    "model.learning_rate": (0.0, None, "(0, inf)"),
    "model.max_depth": (1, None, "[1, inf)"),
    "model.lambda_reg": (0.0, None, "[0, inf)"),
    "model.min_samples_leaf": (1, None, "[1, inf)"),
    "model.max_bins": (3, 256, "[3, 256]"),
    "model.subsample": (0.0, 1.0, "(0, 1]"),
    "model.colsample": (0.0, 1.0, "(0, 1]"),
    "model.zip_max_iter": (1, None, "[1, inf)"),
    "model.glm_subsample": (0.0, 1.0, "(0, 1]"),
    "eval.holdout_fraction": (0.0, 0.99, "[0, 1)"),
    "eval.folds": (2, None, "[2, inf)"),
    "intervals.n_sims": (100, None, "[100, inf)"),
    "intervals.dispersion_scale": (0.0, None, "[0, inf)"),
}
_OPEN_LOW = {"model.learning_rate", "model.subsample", "model.colsample", "model.glm_subsample"}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    intervals: IntervalsSection = field(default_factory=IntervalsSection)
    base_dir: Path = Path(".")

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    def generator_config(self) -> GeneratorConfig:
        return replace(self.generator, rng_seed=self.run.seed)

    def filter_config(self) -> FilterConfig:
        return FilterConfig(self.features.min_duration_months, self.features.bulk_month_share)

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(prevalence=self.features.prevalence,
                             include_sponsor=self.features.include_sponsor)

    def preprocess_config(self) -> PreprocessConfig:
        f = self.features
        return PreprocessConfig(f.winsor_percentile, f.corr_threshold, f.min_category_studies,
                                sparse_threshold=f.sparse_threshold)

    def model_spec(self, family: str | None = None) -> ModelSpec:
        m = self.model
        gbt = GBTParams(n_rounds=m.n_rounds, learning_rate=m.learning_rate, max_depth=m.max_depth,
                        lambda_reg=m.lambda_reg, min_child_weight=m.min_child_weight,
                        min_samples_leaf=m.min_samples_leaf, max_bins=m.max_bins,
                        subsample=m.subsample, colsample=m.colsample, seed=self.run.seed)
        return ModelSpec(family or m.family, gbt=gbt, tweedie_p=m.tweedie_p,
                         preprocess=self.preprocess_config(), ladders=self.feature_config().ladders,
                         zip_tol=m.zip_tol, zip_max_iter=m.zip_max_iter,
                         glm_subsample=m.glm_subsample, glm_log_history=m.glm_log_history,
                         seed=self.run.seed)

    def echo(self) -> str:
        """The effective configuration, every key listed, as INI text."""
        lines = []
        for name in ("run", "paths", "generator", "features", "model", "eval", "intervals"):
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                if name == "generator" and f.name == "rng_seed":
                    continue
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(":".join(_format(x) for x in e) for e in v)
        if len(v) == 2 and all(isinstance(x, int) for x in v):
            return f"{v[0]}-{v[1]}"
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(section: str, key: str, raw: str, default):
    name = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            value = _bool(raw)
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        elif isinstance(default, tuple):
            value = _floats(raw) if default and isinstance(default[0], float) else _names(raw)
        else:
            value = raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from exc
    if name in _RANGES:
        lo, hi, text = _RANGES[name]
        low_bad = value <= lo if name in _OPEN_LOW else value < lo
        if low_bad or (hi is not None and value > hi):
            raise ConfigError(f"{name}: {value} outside the valid interval {text}")
    return value


def _build(cls, section: str, values: dict[str, str]):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _convert(section, key, raw, getattr(cls(), key))
    return cls(**kwargs)


_SECTIONS = {"run": RunSection, "paths": PathsSection, "features": FeaturesSection,
             "model": ModelSection, "eval": EvalSection, "intervals": IntervalsSection}


def parse_config_text(text: str, base_dir=".") -> RunConfig:
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc.message if hasattr(exc, 'message') else exc}") from exc
    parts = {}
    for name in parser.sections():
        values = dict(parser[name])
        if name == "generator":
            if "rng_seed" in values:
                raise ConfigError("generator.rng_seed: set the seed with run.seed (or --seed)")
            gen = generator_config_from_mapping(values)
            try:
                validate_generator_config(gen)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            parts["generator"] = gen
        elif name in _SECTIONS:
            parts[name] = _build(_SECTIONS[name], name, values)
        else:
            raise ConfigError(f"unknown section [{name}]")
    cfg = RunConfig(**parts, base_dir=Path(base_dir))
    try:
        cfg.model_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for m in cfg.eval.models:
        if m not in MODEL_NAMES:
            raise ConfigError(f"eval.models: unknown model {m!r} (choose from {', '.join(MODEL_NAMES)})")
    if cfg.eval.split not in ("random", "time"):
        raise ConfigError("eval.split: must be 'random' or 'time'")
    if any(not 0 < l < 1 for l in cfg.intervals.levels) or not cfg.intervals.levels:
        raise ConfigError("intervals.levels: every level must lie in (0, 1)")
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), path.parent)


def with_overrides(cfg: RunConfig, seed: int | None = None, threads: int | None = None) -> RunConfig:
    run = cfg.run
    if seed is not None:
        run = replace(run, seed=int(seed))
    if threads is not None:
        if threads < 0:
            raise ConfigError("--threads: must be >= 0")
        run = replace(run, threads=int(threads))
    return replace(cfg, run=run)


def effective_threads(cfg: RunConfig) -> int:
    return cfg.run.threads or os.cpu_count() or 1
