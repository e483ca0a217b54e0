from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pandas as pd
import pytest

from enrollcast.cli import main
from enrollcast.config import RunConfig, parse_config_text
from enrollcast.errors import ConfigError

SMOKE_INI = """\
[run]
seed = 5
threads = 1

[generator]
n_studies = 50

[features]
min_category_studies = 5

[model]
n_rounds = 20
max_depth = 3
learning_rate = 0.2

[eval]
models = hist_rate, gbt_tweedie
folds = 3

[intervals]
n_sims = 200
"""


def test_minimal_config_echo():
    cfg = parse_config_text("[run]\nseed = 3\n")
    assert cfg.run.seed == 3 and cfg.model.tweedie_p == 1.5
    echo = cfg.echo()
    for section in ("run", "paths", "generator", "features", "model", "eval", "intervals"):
        assert f"[{section}]" in echo
    assert "tweedie_p = 1.5" in echo and "min_category_studies = 50" in echo
    # the echo parses back to the same configuration
    again = parse_config_text(echo)
    assert again.echo() == echo


@pytest.mark.parametrize("text, match", [
    ("[model]\ntweedie_p = 2.5\n", r"model\.tweedie_p.*\(1, 2\)"),
    ("[run]\nseed = 1\nseed = 2\n", "already exists"),
    ("[model]\nbogus = 1\n", r"unknown key model\.bogus"),
    ("[extras]\na = 1\n", r"unknown section \[extras\]"),
    ("[model]\nn_rounds = many\n", r"model\.n_rounds: cannot parse"),
    ("[generator]\nrng_seed = 4\n", r"generator\.rng_seed"),
    ("[generator]\nzero_inflation = 2\n", r"generator\.zero_inflation"),
    ("[eval]\nmodels = hist_rate, magic\n", "eval.models"),
    ("[intervals]\nn_sims = 10\n", r"intervals\.n_sims"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_paths_resolve_against_config_dir(tmp_path):
    cfg = parse_config_text("[paths]\nwork_dir = out/work\n", base_dir=tmp_path)
    assert cfg.path("work_dir") == tmp_path / "out" / "work"
    assert RunConfig().path("data_dir") == Path("data")


def _run(config: Path, *args) -> int:
    return main([args[0], "--config", str(config), *args[1:]])


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    ini = root / "run.ini"
    ini.write_text(SMOKE_INI)
    for cmd in (["gen"], ["prepare"], ["train", "--model", "gbt_tweedie"], ["predict", "--model", "gbt_tweedie"],
                ["evaluate"], ["intervals", "--model", "gbt_tweedie"]):
        assert _run(ini, *cmd) == 0, cmd
    return root, ini


def test_smoke_pipeline_artifacts(smoke):
    root, _ = smoke
    board = (root / "reports" / "leaderboard.md").read_text()
    assert "| hist_rate |" in board and "| gbt_tweedie |" in board
    metrics = pd.read_csv(root / "reports" / "metrics.csv")
    assert set(metrics["level"]) == {"study", "study-site", "study-site-month"}
    forecast = pd.read_csv(root / "work" / "forecast.csv")
    assert (forecast["pred_mean"] >= 0).all()
    calib = pd.read_csv(root / "reports" / "calibration.csv")
    assert list(calib["level"]) == [0.5, 0.8, 0.9]
    for cmd in ("gen", "prepare", "train_gbt_tweedie", "predict", "evaluate", "intervals"):
        m = json.loads(next(root.rglob(f"manifest_{cmd}.json")).read_text())
        assert m["command"] == cmd and "tool_version" in m and m["outputs"]
        assert "[model]" in m["config"]


def test_rerun_is_byte_identical(smoke):
    root, ini = smoke
    work = root / "work"
    before = {p.name: p.read_bytes() for p in work.iterdir() if p.is_file()}
    assert _run(ini, "prepare") == 0
    assert _run(ini, "train", "--model", "gbt_tweedie") == 0
    after = {p.name: p.read_bytes() for p in work.iterdir() if p.is_file()}
    assert before.keys() == after.keys()
    assert [n for n in before if before[n] != after[n]] == []


def test_predict_schema_mismatch(smoke, tmp_path, capsys):
    root, _ = smoke
    ini = tmp_path / "other.ini"
    ini.write_text(SMOKE_INI.replace("[features]\n", "[features]\ninclude_sponsor = false\n")
                   + f"\n[paths]\ndata_dir = {root / 'data'}\n")
    assert _run(ini, "prepare") == 0
    code = _run(ini, "predict", "--model-file", str(root / "work" / "model_gbt_tweedie.json"))
    assert code == 3
    assert "feature schema" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ntweedie_p = 2.5\n")
    assert _run(bad, "gen") == 2
    assert "model.tweedie_p" in capsys.readouterr().err
    empty = tmp_path / "empty.ini"
    empty.write_text("[run]\nseed = 1\n")
    assert _run(empty, "train") == 3
    assert "enrollcast prepare" in capsys.readouterr().err
    assert _run(tmp_path / "missing.ini", "gen") == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "enrollcast.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen", "prepare", "train", "predict", "evaluate", "intervals"):
        assert cmd in out.stdout
