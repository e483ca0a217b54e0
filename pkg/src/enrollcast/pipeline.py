"""Model registry: train and predict from a raw (unimputed, unprocessed)
feature matrix.

Each fitted model owns its imputation ladders and preprocessing parameters,
so cross-validation refits them per fold from training rows only.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, SchemaMismatchError
from .features import (FeatureConfig, FeatureMatrix, ImputationLadder, PrepParams,
                       PreprocessConfig, apply_preprocess, fit_preprocess, impute_all)
from .models.baseline import HistRateModel, fit_baseline_hist_rate, site_rates
from .models.gbt import GBTModel, GBTParams, TweedieLoss, fit_gbt
from .models.glm import GLMModel, fit_hurdle, fit_zip
from .trialdata import SiteMonthPanel

logger = logging.getLogger(__name__)

MODEL_NAMES = ("hist_rate", "gbt_rate", "gbt_tweedie", "zip", "hurdle_poisson", "hurdle_negbin")
GLM_MODELS = ("zip", "hurdle_poisson", "hurdle_negbin")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    gbt: GBTParams = field(default_factory=GBTParams)
    tweedie_p: float = 1.5
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    ladders: tuple[ImputationLadder, ...] = FeatureConfig().ladders
    zip_tol: float = 1e-6
    zip_max_iter: int = 200
    glm_subsample: float = 1.0
    glm_log_history: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ConfigError(f"model.family: unknown model {self.name!r} (choose from {', '.join(MODEL_NAMES)})")
        if not 1.0 < self.tweedie_p < 2.0:
            raise ConfigError(f"model.tweedie_p: {self.tweedie_p} outside the valid interval (1, 2)")


def targets_for(matrix: FeatureMatrix, panel: SiteMonthPanel) -> np.ndarray:
    """Observed monthly counts aligned with the matrix rows."""
    return panel_counts(matrix.keys, panel)


def panel_counts(keys: pd.DataFrame, panel: SiteMonthPanel) -> np.ndarray:
    """Observed monthly counts aligned with ``keys`` rows."""
    key = ["study_id", "facility_id", "month_index"]
    merged = keys[key].merge(panel.frame[key + ["enrolled_count"]], on=key, how="left")
    if merged["enrolled_count"].isna().any():
        raise DataError("feature rows without a matching panel row")
    return merged["enrolled_count"].to_numpy(np.float64)


def _select(matrix: FeatureMatrix, columns) -> FeatureMatrix:
    cols = list(columns)
    return FeatureMatrix(matrix.keys, matrix.data[cols], {c: matrix.meta[c] for c in cols},
                         {c: v for c, v in matrix.imputation.items() if c in cols})


def _site_level(matrix: FeatureMatrix) -> FeatureMatrix:
    return _select(matrix, [c for c in matrix.columns if matrix.meta[c].level != "site-month"])


def _log_history(matrix: FeatureMatrix) -> FeatureMatrix:
    data = matrix.data.copy()
    for c in matrix.columns:
        if matrix.meta[c].kind == "history":
            data[c] = np.log1p(data[c].to_numpy(np.float64))
    return FeatureMatrix(matrix.keys, data, dict(matrix.meta), dict(matrix.imputation))


@dataclass
class FittedModel:
    spec: ModelSpec
    raw_schema: str
    estimator: object
    prep: PrepParams | None = None
    feature_names: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.spec.name

    def design(self, raw: FeatureMatrix) -> np.ndarray:
        """Imputed, preprocessed numeric design for ``raw`` rows."""
        m = impute_all(raw, self.spec.ladders)
        if self.spec.name == "gbt_rate":
            m = _site_level(m)
        if self.spec.name in GLM_MODELS and self.spec.glm_log_history:
            m = _log_history(m)
        return apply_preprocess(m, self.prep).to_numpy()

    def predict(self, raw: FeatureMatrix) -> np.ndarray:
        """Non-negative predicted monthly mean per row of ``raw``."""
        if raw.schema_hash() != self.raw_schema:
            raise SchemaMismatchError(
                f"model {self.name!r} was trained on feature schema {self.raw_schema}, "
                f"got {raw.schema_hash()}")
        if self.spec.name == "hist_rate":
            return self.estimator.predict(impute_all(raw, self.spec.ladders))
        pred = self.estimator.predict(self.design(raw))
        return np.maximum(np.asarray(pred, dtype=np.float64), 0.0)


def train_model(spec: ModelSpec, raw: FeatureMatrix, y, train_mask=None) -> FittedModel:
    """Fit ``spec`` on the rows of ``raw`` selected by ``train_mask``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != len(raw):
        raise DataError("targets and feature rows differ in length")
    mask = np.ones(len(raw), bool) if train_mask is None else np.asarray(train_mask, bool)
    if not mask.any():
        raise DataError("empty training set")
    train = raw.take(mask)
    ytr = y[mask]
    schema = raw.schema_hash()

    if spec.name == "hist_rate":
        return FittedModel(spec, schema, fit_baseline_hist_rate(train.keys, ytr))

    m = impute_all(train, spec.ladders)
    if spec.name == "gbt_rate":
        # one row per study-site, target = its observed monthly rate
        m = _site_level(m)
        first = ~m.keys.duplicated(["study_id", "facility_id"]).to_numpy()
        m = m.take(first)
        rates = site_rates(train.keys, ytr).set_index(["study_id", "facility_id"])["rate"]
        target = rates.reindex(pd.MultiIndex.from_frame(m.keys[["study_id", "facility_id"]])).to_numpy()
        prep = fit_preprocess(m, replace(spec.preprocess, glm=False))
        X = apply_preprocess(m, prep)
        est = fit_gbt(X.to_numpy(), target, TweedieLoss(spec.tweedie_p), spec.gbt,
                      schema_hash=schema, feature_names=X.columns)
        return FittedModel(spec, schema, est, prep, X.columns)

    glm = spec.name in GLM_MODELS
    if glm and spec.glm_log_history:
        m = _log_history(m)
    prep = fit_preprocess(m, replace(spec.preprocess, glm=glm))
    X = apply_preprocess(m, prep)
    names = X.columns
    if spec.name == "gbt_tweedie":
        est = fit_gbt(X.to_numpy(), ytr, TweedieLoss(spec.tweedie_p), spec.gbt,
                      schema_hash=schema, feature_names=names)
    elif spec.name == "zip":
        est = fit_zip(X.to_numpy(), ytr, tol=spec.zip_tol, max_iter=spec.zip_max_iter,
                      subsample=spec.glm_subsample, seed=spec.seed, feature_names=names,
                      schema_hash=schema)
    else:
        family = "poisson" if spec.name == "hurdle_poisson" else "negative_binomial"
        est = fit_hurdle(X.to_numpy(), ytr, family, feature_names=names, schema_hash=schema)
    logger.info("trained %s on %d rows x %d features", spec.name, len(ytr), len(names))
    return FittedModel(spec, schema, est, prep, names)


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["ladders"] = [list(l.rungs) for l in spec.ladders]
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["gbt"] = GBTParams(**d["gbt"])
    d["preprocess"] = PreprocessConfig(**d["preprocess"])
    d["ladders"] = tuple(ImputationLadder(tuple(r)) for r in d["ladders"])
    return ModelSpec(**d)


def estimator_from_dict(d: dict):
    fam = d.get("family")
    if fam == "hist_rate":
        return HistRateModel.from_dict(d)
    if fam in ("zip", "hurdle"):
        return GLMModel.from_dict(d)
    return GBTModel.from_dict(d)
