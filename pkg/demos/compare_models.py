"""Generate a synthetic cohort and compare forecasters by 5-fold CV.

    python3 demos/compare_models.py [n_studies]

Prints a markdown leaderboard of study-level and site-level MAE.
"""
from __future__ import annotations

import logging
import sys

from enrollcast.evalharness import compute_metrics, cross_validate, leaderboard, make_random_split
from enrollcast.features import assemble_design_matrix
from enrollcast.models.gbt import GBTParams
from enrollcast.pipeline import ModelSpec, targets_for, train_model
from enrollcast.syncohort import GeneratorConfig, generate_cohort
from enrollcast.trialdata import apply_cohort_filters, build_site_month_panel, summarize_cohort

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

n_studies = int(sys.argv[1]) if len(sys.argv) > 1 else 150
cohort, truth = generate_cohort(GeneratorConfig(n_studies=n_studies, rng_seed=1))
cohort = apply_cohort_filters(cohort)
print(summarize_cohort(cohort).to_string())

# one row per site-month, features cut off at each study's initiation date
panel = build_site_month_panel(cohort)
raw = assemble_design_matrix(cohort, panel)
y = targets_for(raw, panel)

plan = make_random_split(cohort.studies["study_id"], 0.0, 5, seed=1)
gbt = GBTParams(n_rounds=120, max_depth=4, learning_rate=0.08, min_samples_leaf=50)
reports = []
for name in ("hist_rate", "gbt_tweedie", "zip"):
    oof = cross_validate(ModelSpec(name, gbt=gbt), raw, y, plan, train_model)
    reports += [compute_metrics(oof, panel, level, name) for level in ("study", "study-site")]
print(leaderboard(reports))
