"""Versioned JSON model files: a header (family, schema hash, hyperparameters)
followed by a body (trees, coefficients or baseline constants) and the
preprocessing parameters needed to rebuild the design matrix."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from ..errors import DataError

FORMAT = "enrollcast-model"
VERSION = 1


def model_to_dict(fitted) -> dict:
    from ..pipeline import spec_to_dict

    return {
        "format": FORMAT,
        "version": VERSION,
        "header": {
            "family": fitted.name,
            "schema_hash": fitted.raw_schema,
            "hyperparams": spec_to_dict(fitted.spec),
        },
        "body": fitted.estimator.to_dict(),
        "prep": None if fitted.prep is None else asdict(fitted.prep),
        "feature_names": list(fitted.feature_names),
    }


def model_from_dict(d: dict):
    from ..features import PrepParams
    from ..pipeline import FittedModel, estimator_from_dict, spec_from_dict

    if d.get("format") != FORMAT:
        raise DataError("not an enrollcast model file")
    if d.get("version") != VERSION:
        raise DataError(f"unsupported model file version {d.get('version')!r} (expected {VERSION})")
    h = d["header"]
    prep = None if d["prep"] is None else PrepParams(**d["prep"])
    return FittedModel(spec_from_dict(h["hyperparams"]), h["schema_hash"],
                       estimator_from_dict(d["body"]), prep, list(d["feature_names"]))


def save_model(fitted, path) -> None:
    text = json.dumps(model_to_dict(fitted), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_model(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    return model_from_dict(d)
