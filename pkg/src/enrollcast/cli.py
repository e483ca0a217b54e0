"""``enrollcast`` command-line entry point.

    enrollcast <command> --config run.ini [--threads N] [--seed S]

Commands run in pipeline order: gen, prepare, train, predict, evaluate,
intervals. Each writes its artifacts plus ``manifest_<command>.json`` (input
and output hashes, effective config, tool version) into its output
directory. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from .config import RunConfig, effective_threads, parse_config, with_overrides
from .errors import DataError, EnrollcastError, NumericError
from .evalharness import (HOLDOUT, SplitPlan, calibration_report, cross_validate,
                          evaluate_forecast, make_random_split, make_rolling_time_split,
                          per_quarter_mae, rolling_evaluation, write_reports)
from .features import FeatureMatrix, assemble_design_matrix, impute_all, fit_preprocess
from .models.forecast import build_forecast
from .models.intervals import prediction_intervals
from .models.serialize import load_model, save_model
from .models.tweedie import estimate_dispersion
from .pipeline import panel_counts, targets_for, train_model
from .syncohort import generate_cohort, write_generated
from .trialdata import (SiteMonthPanel, apply_cohort_filters, build_site_month_panel,
                        load_cohort, write_cohort, write_exclusions)

logger = logging.getLogger("enrollcast")

COMMANDS = ("gen", "prepare", "train", "predict", "evaluate", "intervals")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing upstream artifact {path} (run `enrollcast {producer}` first)")
    return path


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    return path


def _manifest(cfg: RunConfig, command: str, out_dir: Path, inputs, outputs, extra=None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = out_dir / f"config_{command}.ini"
    echo.write_text(cfg.echo())
    base = cfg.base_dir

    def rel(p):
        try:
            return str(Path(p).resolve().relative_to(base.resolve()))
        except ValueError:
            return str(p)

    doc = {
        "command": command,
        "tool": "enrollcast",
        "tool_version": tool_version(),
        "config": cfg.echo(),
        "inputs": {rel(p): sha256(p) for p in sorted(set(map(Path, inputs)))},
        "outputs": {rel(p): sha256(p) for p in sorted(set(map(Path, outputs)) | {echo})},
    }
    if extra:
        doc.update(extra)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def _cohort_paths(directory: Path) -> list[Path]:
    return [directory / n for n in ("studies.csv", "sites.csv", "events.csv")]


def _load_prepared(cfg: RunConfig):
    work = cfg.path("work_dir")
    cohort_dir = work / "cohort"
    paths = [_require(p, "prepare") for p in _cohort_paths(cohort_dir)]
    cohort = load_cohort(*paths, site_slack_months=cfg.features.site_slack_months)
    panel_path = _require(work / "panel.csv", "prepare")
    frame = pd.read_csv(panel_path, dtype={"study_id": str, "facility_id": str})
    panel = SiteMonthPanel(frame)
    feat = _require(work / "features.csv", "prepare")
    schema = _require(work / "schema.csv", "prepare")
    raw = FeatureMatrix.read(feat, schema)
    split = pd.read_csv(_require(work / "split.csv", "prepare"), dtype=str)
    assign = split.set_index("study_id")["assignment"].map(lambda a: a if a == HOLDOUT else int(a))
    plan = SplitPlan(assign, cfg.run.seed, cfg.eval.holdout_fraction, cfg.eval.folds)
    inputs = paths + [panel_path, feat, schema, work / "split.csv"]
    return cohort, panel, raw, plan, inputs


def _model_path(cfg: RunConfig, family: str) -> Path:
    return cfg.path("work_dir") / f"model_{family}.json"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> None:
    out = cfg.path("data_dir")
    out.mkdir(parents=True, exist_ok=True)
    cohort, truth = generate_cohort(cfg.generator_config())
    paths = write_generated(cohort, truth, out)
    _manifest(cfg, "gen", out, [], list(paths.values()))
    print(f"generated {len(cohort.studies)} studies into {out}")


def cmd_prepare(cfg: RunConfig, args) -> None:
    data, work = cfg.path("data_dir"), cfg.path("work_dir")
    inputs = [_require(p, "gen") for p in _cohort_paths(data)]
    cohort = load_cohort(*inputs, site_slack_months=cfg.features.site_slack_months)
    cohort = apply_cohort_filters(cohort, cfg.filter_config())
    if cohort.studies.empty:
        raise DataError("no studies survive the cohort filters")
    work.mkdir(parents=True, exist_ok=True)
    outputs = list(write_cohort(cohort, work / "cohort").values())
    write_exclusions(cohort, work / "exclusions.csv")
    panel = build_site_month_panel(cohort)
    _write_csv(panel.frame, work / "panel.csv")
    raw = assemble_design_matrix(cohort, panel, cfg.feature_config())
    raw.write(work / "features.csv", work / "schema.csv")
    plan = make_random_split(cohort.studies["study_id"], cfg.eval.holdout_fraction,
                             cfg.eval.folds, cfg.run.seed)
    _write_csv(plan.frame(), work / "split.csv")
    # tree-path preprocessing fitted on discovery rows, for inspection and reuse
    imputed = impute_all(raw, cfg.feature_config().ladders)
    prep = fit_preprocess(imputed, cfg.preprocess_config(), raw.study_mask(plan.discovery))
    prep.write(work / "prep_params.csv")
    outputs += [work / n for n in ("exclusions.csv", "panel.csv", "features.csv", "schema.csv",
                                   "split.csv", "prep_params.csv")]
    _manifest(cfg, "prepare", work, inputs, outputs)
    print(f"prepared {len(cohort.studies)} studies, {len(raw)} site-month rows, "
          f"{len(raw.columns)} feature columns")


def _train_log(fitted, n_rows: int) -> dict:
    est = fitted.estimator
    log = {"family": fitted.name, "n_rows": n_rows, "n_features": len(fitted.feature_names),
           "schema_hash": fitted.raw_schema}
    if hasattr(est, "trees"):
        log["n_trees"] = len(est.trees)
    if hasattr(est, "loglik_trace"):
        log.update(loglik=est.loglik, iterations=est.iterations, converged=est.converged,
                   flags=list(est.flags), loglik_trace=list(est.loglik_trace))
    if hasattr(est, "global_rate"):
        log["global_rate"] = est.global_rate
    return log


def cmd_train(cfg: RunConfig, args) -> None:
    family = args.model or cfg.model.family
    spec = cfg.model_spec(family)
    cohort, panel, raw, plan, inputs = _load_prepared(cfg)
    y = targets_for(raw, panel)
    mask = raw.study_mask(plan.discovery)
    fitted = train_model(spec, raw, y, mask)
    work = cfg.path("work_dir")
    model_path = _model_path(cfg, family)
    save_model(fitted, model_path)
    log_path = work / f"train_log_{family}.json"
    log_path.write_text(json.dumps(_train_log(fitted, int(mask.sum())), indent=1, sort_keys=True) + "\n")
    _manifest(cfg, f"train_{family}", work, inputs, [model_path, log_path])
    print(f"trained {family} on {int(mask.sum())} rows -> {model_path}")


def cmd_predict(cfg: RunConfig, args) -> None:
    family = args.model or cfg.model.family
    work = cfg.path("work_dir")
    model_path = Path(args.model_file) if args.model_file else _require(_model_path(cfg, family), "train")
    fitted = load_model(model_path)
    feat = _require(work / "features.csv", "prepare")
    raw = FeatureMatrix.read(feat, _require(work / "schema.csv", "prepare"))
    pred = fitted.predict(raw)
    out = Path(args.output) if args.output else work / "forecast.csv"
    _write_csv(raw.keys.assign(pred_mean=pred), out)
    _manifest(cfg, "predict", out.parent, [model_path, feat, work / "schema.csv"], [out])
    print(f"wrote {len(pred)} predictions to {out}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    cohort, panel, raw, plan, inputs = _load_prepared(cfg)
    y = targets_for(raw, panel)
    reports_dir = cfg.path("report_dir")
    reports_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    metrics, milestones, oof_parts = [], [], []
    if cfg.eval.split == "random":
        for family in cfg.eval.models:
            oof = cross_validate(cfg.model_spec(family), raw, y, plan, train_model,
                                 include_holdout=args.holdout)
            oof_parts.append(oof.assign(model=family))
            cv = oof[oof["fold"] != HOLDOUT]
            m, ms = evaluate_forecast(cv, panel, cohort, family)
            metrics += m
            milestones += ms
            if args.holdout:
                ho = oof[oof["fold"] == HOLDOUT]
                if len(ho):
                    m, ms = evaluate_forecast(ho, panel, cohort, f"{family} (holdout)")
                    metrics += m
                    milestones += ms
            print(f"evaluated {family}")
    else:
        if not (cfg.eval.start_quarter and cfg.eval.end_quarter):
            raise DataError("eval.split = time needs eval.start_quarter and eval.end_quarter")
        splits = make_rolling_time_split(cohort, cfg.eval.start_quarter, cfg.eval.end_quarter)
        all_plan = make_random_split(cohort.studies["study_id"], 0.0, cfg.eval.folds, cfg.run.seed)
        rows = []
        for family in cfg.eval.models:
            spec = cfg.model_spec(family)
            roll = rolling_evaluation(spec, raw, y, splits, train_model)
            timed = roll.attrs["predictions"]
            oof = cross_validate(spec, raw, y, all_plan, train_model)
            oof_y = panel_counts(oof, panel)
            rq = per_quarter_mae(oof, oof_y, cohort, roll["quarter"])
            rows.append(roll.assign(model=family, split_type="time"))
            rows.append(rq.assign(model=family, split_type="random"))
            m, ms = evaluate_forecast(timed.drop_duplicates(["study_id", "facility_id", "month_index"]),
                                      panel, cohort, f"{family} (time)")
            metrics += m
            milestones += ms
            oof_parts.append(timed.assign(model=family, fold="time"))
            print(f"evaluated {family} over {len(splits)} quarters")
        rolling = pd.concat(rows, ignore_index=True)[["model", "split_type", "quarter", "n_test", "mae"]]
        outputs.append(_write_csv(rolling, reports_dir / "rolling.csv"))
    paths = write_reports(reports_dir, metrics, milestones)
    outputs += list(paths.values())
    outputs.append(_write_csv(pd.concat(oof_parts, ignore_index=True), reports_dir / "oof_predictions.csv"))
    _manifest(cfg, "evaluate", reports_dir, inputs, outputs)
    print((reports_dir / "leaderboard.md").read_text(), end="")


def cmd_intervals(cfg: RunConfig, args) -> None:
    family = args.model or cfg.model.family
    cohort, panel, raw, plan, inputs = _load_prepared(cfg)
    model_path = _require(_model_path(cfg, family), "train")
    fitted = load_model(model_path)
    y = targets_for(raw, panel)
    p = fitted.spec.tweedie_p
    disc = raw.study_mask(plan.discovery)
    train_pred = fitted.predict(raw.take(disc))
    phi = estimate_dispersion(y[disc], train_pred, p, len(fitted.feature_names))
    targets = plan.holdout or plan.discovery
    if not plan.holdout:
        logger.warning("no holdout studies: intervals are computed in-sample")
    mask = raw.study_mask(targets)
    sub = raw.take(mask)
    fc = build_forecast(sub.keys, fitted.predict(sub), cohort.subset(targets))
    ic = cfg.intervals
    bands = prediction_intervals(fc, phi, p, ic.n_sims, ic.levels, ic.dispersion_scale, cfg.run.seed)
    actual = pd.Series(y[mask], index=sub.keys.index).groupby(sub.keys["study_id"]).sum()
    calib = calibration_report(bands.totals, actual, ic.levels)
    calib.insert(0, "dispersion", phi * ic.dispersion_scale)
    out = cfg.path("report_dir")
    out.mkdir(parents=True, exist_ok=True)
    outputs = [_write_csv(calib, out / "calibration.csv"),
               _write_csv(bands.bands, out / "bands.csv"),
               _write_csv(bands.totals, out / "band_totals.csv"),
               _write_csv(bands.milestones, out / "milestone_bands.csv")]
    _manifest(cfg, "intervals", out, inputs + [model_path], outputs)
    print(calib.to_string(index=False))


HANDLERS = {"gen": cmd_gen, "prepare": cmd_prepare, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "intervals": cmd_intervals}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enrollcast", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run configuration")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic cohort")
    sub.add_parser("prepare", parents=[common], help="filter, expand and featurise a cohort")
    for name, text in (("train", "fit a model on the discovery studies"),
                       ("predict", "write forecast.csv from a trained model"),
                       ("intervals", "Monte-Carlo prediction bands and calibration")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--model", default=None, help="model family (default: model.family)")
        if name == "predict":
            p.add_argument("--model-file", default=None, help="explicit model file")
            p.add_argument("--output", default=None, help="output path (default: work_dir/forecast.csv)")
    p = sub.add_parser("evaluate", parents=[common], help="cross-validated comparison of eval.models")
    p.add_argument("--holdout", action="store_true", help="also score the holdout studies")
    return parser


def _set_threads(n: int) -> None:
    import os

    import numba

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the portable layer; avoids probing an outdated system TBB
        numba.config.THREADING_LAYER = "workqueue"
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = with_overrides(parse_config(args.config), args.seed, args.threads)
        _set_threads(effective_threads(cfg))
        with np.errstate(over="ignore", under="ignore"):
            HANDLERS[args.command](cfg, args)
    except EnrollcastError as exc:
        print(f"enrollcast: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"enrollcast: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
