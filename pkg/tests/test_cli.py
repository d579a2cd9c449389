import json
import subprocess
import sys

import pytest

from knockoff_ensemble.cli import main

TINY = {
    "data": {"n": 80, "p": 10, "r": 2, "s": 4, "amplitude": 20.0},
    "grid": {"lambda_range": [1e-3, 1e-2, 2], "epochs": 3, "folds": 3, "hidden": 6},
    "ensembles": [{"strategy": "best"}, {"strategy": "m_influential", "m": 3}],
    "replicates": 2,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_stepwise_commands(tmp_path, config, capsys):
    d = str(tmp_path / "run")
    assert main(["simulate", "--config", config, "--seed", "3", "--out-dir", d]) == 0
    assert main(["knockoffs", "--data", f"{d}/data.csv", "--M", "2", "--seed", "1", "--out-dir", d]) == 0
    assert main([
        "train", "--config", config, "--data", f"{d}/data.csv", "--augmented", f"{d}/augmented.csv",
        "--knockoff-model", f"{d}/knockoff_model.json", "--out-dir", d,
    ]) == 0
    assert main(["ensemble", "--trajectory", f"{d}/trajectory", "--strategy", "top_m", "--m", "4",
                 "--out-dir", d]) == 0
    assert main(["select", "--importance", f"{d}/ensemble.csv", "--M", "2", "--out-dir", d]) == 0
    assert main(["evaluate", "--selection", f"{d}/selection.json", "--truth", f"{d}/data.json",
                 "--out-dir", d]) == 0
    assert "power=" in capsys.readouterr().out
    lines = (tmp_path / "run" / "evaluation.csv").read_text().splitlines()
    assert lines[0] == "power,fdp,n_selected"


def test_pipeline_command_is_reproducible(tmp_path, config):
    for name in ("a", "b"):
        assert main(["pipeline", "--config", config, "--seed", "7", "--out-dir", str(tmp_path / name)]) == 0
    for name in ("results.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_stability_command(tmp_path, config, capsys):
    assert main(["stability", "--config", config, "--repeats", "2", "--out-dir", str(tmp_path)]) == 0
    assert "median_jaccard" in capsys.readouterr().out
    report = json.loads((tmp_path / "stability.json").read_text())
    assert set(report["strategies"]) == {"best", "m_influential(3)"}


def test_exit_codes_follow_error_category(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"q": 1.5}))
    assert main(["pipeline", "--config", str(bad)]) == 2
    missing_col = tmp_path / "d.csv"
    missing_col.write_text("a,b\n1,2\n3,4\n5,7\n")
    assert main(["knockoffs", "--data", str(missing_col), "--response", "y", "--out-dir", str(tmp_path)]) == 3
    assert main(["pipeline", "--config", str(tmp_path / "nope.json")]) == 1
    assert "error:" in capsys.readouterr().err


def test_console_entry_point_help():
    out = subprocess.run(
        [sys.executable, "-m", "knockoff_ensemble.cli", "--help"], capture_output=True, text=True, check=True
    ).stdout
    for sub in ("simulate", "knockoffs", "train", "ensemble", "select", "evaluate", "pipeline", "stability"):
        assert sub in out
