import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qehvi.cli import build_parser, main

FAST = ["--restarts", "2", "--raw-samples", "32", "--max-iterations", "20", "--mc-samples", "16"]


def test_help_lists_subcommands():
    text = build_parser().format_help()
    for cmd in ("run", "sweep", "plot", "hv"):
        assert cmd in text


def test_run_flags_present():
    text = build_parser()._subparsers._group_actions[0].choices["run"].format_help()
    for flag in ("--problem", "--method", "--q", "--budget", "--seed", "--mc-samples", "--zeta", "--mode",
                 "--infer-ref", "--out"):
        assert flag in text


def test_run_writes_json_and_csv(tmp_path, capsys):
    assert main(["run", "--problem", "branin_currin", "--method", "qparego", "--budget", "8",
                 "--seed", "2", "--out", str(tmp_path), *FAST]) == 0
    assert "branin_currin qparego" in capsys.readouterr().out
    [trial] = list(tmp_path.glob("*.json"))
    data = json.loads(trial.read_text())
    assert data["schema_version"] == 1 and data["config"]["seed"] == 2
    with (tmp_path / "results.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["evaluations"]) for r in rows] == [6, 7, 8]


def test_sweep_then_plot(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--problem", "branin_currin", "--method", "sobol", "qehvi", "--trials", "2",
                 "--budget", "7", "--out", str(out), *FAST]) == 0
    assert len(list(out.glob("*.json"))) == 4
    svg = tmp_path / "curves.svg"
    assert main(["plot", str(out / "results.csv"), "--out", str(svg), "--x", "iteration"]) == 0
    assert svg.read_text().lstrip().startswith("<?xml") and "<svg" in svg.read_text()


def test_hv_subcommand(tmp_path, capsys):
    pts = tmp_path / "p.csv"
    np.savetxt(pts, [[1.0, 2.0], [2.0, 1.0]], delimiter=",")
    new = tmp_path / "n.csv"
    np.savetxt(new, [[1.5, 1.5]], delimiter=",")
    dest = tmp_path / "hv.json"
    assert main(["hv", str(pts), "--ref", "0,0", "--new", str(new), "--decompose", "--out", str(dest)]) == 0
    out = json.loads(dest.read_text())
    assert out["hv"] == pytest.approx(3.0)
    assert out["hvi"] == pytest.approx(0.25)
    assert out["schema_version"] == 1
    assert len(out["decomposition"]["lowers"]) == 3
    assert json.loads(capsys.readouterr().out) == out


def test_hv_needs_reference(tmp_path):
    pts = tmp_path / "p.csv"
    np.savetxt(pts, [[1.0, 2.0]], delimiter=",")
    with pytest.raises(SystemExit):
        main(["hv", str(pts)])


def test_console_module_entry(tmp_path):
    pts = tmp_path / "p.csv"
    np.savetxt(pts, [[1.0, 1.0]], delimiter=",")
    res = subprocess.run([sys.executable, "-m", "qehvi", "hv", str(pts), "--ref", "0,0"],
                         capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["hv"] == 1.0


def test_bad_arguments_exit():
    with pytest.raises(SystemExit):
        main(["run", "--problem", "nope", "--out", "x"])
