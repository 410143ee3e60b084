"""End-to-end checks of the command-line driver (in-process via main)."""

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cvarsynth.cli import main
from cvarsynth.sampling import DistributionSpec, ParamDist
from cvarsynth.losses import LossSpec
from cvarsynth.synth import (
    ProblemSpec,
    Requirement,
    ScenarioConfig,
    SolverOptions,
    problem_to_dict,
    save_problem,
)

from conftest import build_oscillator


def small_problem(mode="cvar"):
    model, tmpl, k0 = build_oscillator()
    dists = DistributionSpec((ParamDist("stiff", "gaussian", sd=1.0 / 3.0),))
    reqs = (
        Requirement("perf", LossSpec("h2_squared", "w", "y"), "soft", beta=0.9),
        Requirement("effort", LossSpec("h2_squared", "w", "u"), "hard",
                    bound=4.0, beta=0.9),
    )
    return ProblemSpec(
        model=model, template=tmpl, requirements=reqs,
        scenario=ScenarioConfig(dists=dists, seed=11, schedule=(30, 60)),
        k0=k0, mode=mode,
    )


@pytest.fixture
def problem_file(tmp_path):
    path = tmp_path / "problem.json"
    save_problem(path, small_problem(),
                 options=SolverOptions(max_iters=(8, 6), tau_rounds=2))
    return str(path)


def fake_result(path, k, mode="cvar", status="converged"):
    doc = {
        "format": "cvarsynth-result-v1",
        "mode": mode,
        "status": status,
        "k_star": list(np.asarray(k, dtype=float)),
        "config_hash": "deadbeefdeadbeef",
        "seed": 11,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return str(path)


class TestSynth:
    def test_writes_result_and_log(self, problem_file, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["synth", "--problem", problem_file, "--out", str(out)])
        res = json.loads((out / "result.json").read_text())
        assert code == {"converged": 0, "stalled": 2, "iter_limit": 2}[res["status"]]
        assert res["mode"] == "cvar"
        assert len(res["k_star"]) == 4
        assert res["config_hash"]
        with open(out / "iterations.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and "exact_merit" in rows[0]
        assert "status:" in capsys.readouterr().out

    def test_mode_flag_overrides_file(self, problem_file, tmp_path):
        out = tmp_path / "run"
        main(["synth", "--problem", problem_file, "--mode", "minmax",
              "--out", str(out), "--samples", "25"])
        res = json.loads((out / "result.json").read_text())
        assert res["mode"] == "minmax"

    def test_samples_flag_collapses_schedule(self, problem_file, tmp_path):
        out = tmp_path / "run"
        main(["synth", "--problem", problem_file, "--samples", "20",
              "--out", str(out)])
        with open(out / "iterations.csv") as fh:
            stages = {row["stage_n"] for row in csv.DictReader(fh)}
        assert stages <= {"20"}

    def test_ragged_matrix_names_field(self, tmp_path, capsys):
        path = tmp_path / "problem.json"
        doc = problem_to_dict(small_problem())
        doc["model"]["state_space"]["A"] = [[0.0, 1.0], [1.0]]
        path.write_text(json.dumps(doc))
        code = main(["synth", "--problem", str(path)])
        assert code == 1
        assert "state_space.A" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        code = main(["synth", "--problem", "/nonexistent/p.json"])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        code = main(["synth"])
        assert code == 1
        assert "--problem" in capsys.readouterr().err


class TestAnalyze:
    def test_metrics_and_histograms(self, problem_file, tmp_path, capsys):
        model, tmpl, k0 = build_oscillator()
        res = fake_result(tmp_path / "result.json", k0)
        out = tmp_path / "out"
        code = main(["analyze", "--problem", problem_file, "--result", res,
                     "--samples", "200", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["n_samples"] == 200
        assert doc["config_hash"] == "deadbeefdeadbeef"
        assert doc["unstable_count"] == 0
        names = [r["requirement"] for r in doc["requirements"]]
        assert names == ["perf", "effort"]
        for rec in doc["requirements"]:
            assert rec["var"] <= rec["cvar"] <= rec["worst_in_sample"]
        # histogram counts for each requirement add up to the stable count
        for name in names:
            with open(out / f"hist_{name}.csv") as fh:
                rows = list(csv.DictReader(fh))
            assert len(rows) == 60
            assert sum(int(r["count"]) for r in rows) == 200

    def test_unstable_design_still_reports(self, problem_file, tmp_path):
        res = fake_result(tmp_path / "result.json", [-1.0, 0.0, 0.0, -10.0])
        out = tmp_path / "out"
        code = main(["analyze", "--problem", problem_file, "--result", res,
                     "--samples", "50", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["unstable_count"] == 50
        assert doc["requirements"][0]["cvar"] is None
        assert not (out / "hist_perf.csv").exists()

    def test_worker_count_never_changes_output(self, problem_file, tmp_path):
        model, tmpl, k0 = build_oscillator()
        res = fake_result(tmp_path / "result.json", k0)
        outs = []
        for w, label in ((1, "a"), (3, "b")):
            out = tmp_path / label
            main(["analyze", "--problem", problem_file, "--result", res,
                  "--samples", "120", "--workers", str(w), "--out", str(out)])
            outs.append((out / "metrics.json").read_bytes())
        assert outs[0] == outs[1]

    def test_workers_env_var(self, problem_file, tmp_path, monkeypatch):
        model, tmpl, k0 = build_oscillator()
        res = fake_result(tmp_path / "result.json", k0)
        monkeypatch.setenv("CVARSYNTH_WORKERS", "2")
        out = tmp_path / "out"
        assert main(["analyze", "--problem", problem_file, "--result", res,
                     "--samples", "40", "--out", str(out)]) == 0

    def test_incompatible_template(self, problem_file, tmp_path, capsys):
        res = fake_result(tmp_path / "result.json", [1.0, 2.0])
        code = main(["analyze", "--problem", problem_file, "--result", res,
                     "--samples", "10", "--out", str(tmp_path / "o")])
        assert code == 1
        assert "free parameters" in capsys.readouterr().err


class TestCertify:
    def test_bound_only(self, capsys):
        assert main(["certify", "--gamma", "1e-4", "--eps", "1e-3"]) == 0
        out = capsys.readouterr().out
        assert "9206" in out
        assert "99.99%" in out and "99.9%" in out

    def test_degenerate_levels(self, capsys):
        assert main(["certify", "--gamma", "0.5", "--eps", "0.5"]) == 0
        assert "required sample count: 1" in capsys.readouterr().out

    def test_invalid_levels(self, capsys):
        assert main(["certify", "--gamma", "0", "--eps", "0.5"]) == 1
        assert main(["certify", "--gamma", "0.1"]) == 1

    def test_empirical_certificate(self, problem_file, tmp_path, capsys):
        model, tmpl, k0 = build_oscillator()
        res = fake_result(tmp_path / "result.json", k0)
        out = tmp_path / "out"
        code = main(["certify", "--gamma", "0.01", "--eps", "0.05",
                     "--problem", problem_file, "--result", res,
                     "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "certificate.json").read_text())
        assert doc["required_n"] == 90
        assert doc["n_evaluated"] == 90
        assert doc["config_hash"] == "deadbeefdeadbeef"
        assert doc["requirements"][0]["requirement"] == "effort"
        assert "probability at least 99%" in doc["statement"]


class TestCompare:
    def test_two_designs(self, problem_file, tmp_path, capsys):
        model, tmpl, k0 = build_oscillator()
        a = fake_result(tmp_path / "a.json", k0, mode="minmax")
        b = fake_result(tmp_path / "b.json", k0 * 1.1, mode="cvar")
        out = tmp_path / "out"
        code = main(["compare", "--problem", problem_file,
                     "--result", a, b, "--samples", "80", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "compare.json").read_text())
        assert doc["n_samples"] == 80
        assert {r["design"] for r in doc["rows"]} == {"minmax", "cvar"}
        assert len(doc["rows"]) == 4
        text = capsys.readouterr().out
        assert "minmax" in text and "cvar" in text

    def test_same_result_twice_gives_identical_rows(self, problem_file, tmp_path):
        model, tmpl, k0 = build_oscillator()
        a = fake_result(tmp_path / "a.json", k0)
        b = fake_result(tmp_path / "b.json", k0)
        out = tmp_path / "out"
        main(["compare", "--problem", problem_file, "--result", a, b,
              "--samples", "60", "--out", str(out)])
        doc = json.loads((out / "compare.json").read_text())
        by_design = {}
        for row in doc["rows"]:
            label = row.pop("design")
            by_design.setdefault(label, []).append(row)
        assert by_design["cvar#1"] == by_design["cvar#2"]

    def test_missing_result_file(self, problem_file, tmp_path, capsys):
        model, tmpl, k0 = build_oscillator()
        a = fake_result(tmp_path / "a.json", k0)
        code = main(["compare", "--problem", problem_file,
                     "--result", a, str(tmp_path / "nope.json")])
        assert code == 1


def test_console_script_help():
    proc = subprocess.run(
        [sys.executable, "-m", "cvarsynth.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    for cmd in ("synth", "analyze", "certify", "compare"):
        assert cmd in proc.stdout
