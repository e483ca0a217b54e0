"""Train a Tweedie GBT, then forecast one held-out study with intervals.

    python3 demos/forecast_one_study.py

Shows the evaluation forecast (actual site schedule) next to the realised
enrollment, the 80% band on the cumulative curve, and a planning forecast
that runs until the target is reached.
"""
from __future__ import annotations

import numpy as np

from enrollcast.features import assemble_design_matrix
from enrollcast.models.forecast import build_forecast, forecast_study
from enrollcast.models.gbt import GBTParams
from enrollcast.models.intervals import prediction_intervals
from enrollcast.models.tweedie import estimate_dispersion
from enrollcast.pipeline import ModelSpec, targets_for, train_model
from enrollcast.syncohort import GeneratorConfig, generate_cohort
from enrollcast.trialdata import apply_cohort_filters, build_site_month_panel

cohort, _ = generate_cohort(GeneratorConfig(n_studies=120, rng_seed=3))
cohort = apply_cohort_filters(cohort)
panel = build_site_month_panel(cohort)
raw = assemble_design_matrix(cohort, panel)
y = targets_for(raw, panel)

# hold out the most recently initiated study
focal = cohort.studies.sort_values("ecrf_date")["study_id"].iloc[-1]
train = ~raw.study_mask([focal])
spec = ModelSpec("gbt_tweedie", gbt=GBTParams(n_rounds=120, max_depth=4, learning_rate=0.08,
                                              min_samples_leaf=50))
model = train_model(spec, raw, y, train)
phi = estimate_dispersion(y[train], model.predict(raw.take(train)), spec.tweedie_p)
print(f"focal study {focal}, Pearson dispersion {phi:.2f}")

test = raw.take(~train)
fc = build_forecast(test.keys, model.predict(test), cohort)
bands = prediction_intervals(fc, phi, spec.tweedie_p, n_sims=1000, levels=(0.8,), seed=0)
actual = (panel.frame[panel.frame["study_id"] == focal]
          .groupby("month_ord")["enrolled_count"].sum().cumsum().to_numpy())
curve = bands.bands[["study_month", "mean", "lower", "upper"]].reset_index(drop=True)
curve["actual"] = np.pad(actual, (0, max(0, len(curve) - len(actual))), mode="edge")[:len(curve)]
print(curve.round(1).to_string(index=False))
print(fc.milestones.to_string(index=False))

plan = forecast_study(model, cohort, focal, mode="planning")
print("planning milestones (study month):")
print(plan.milestones.to_string(index=False))
