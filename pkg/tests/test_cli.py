from __future__ import annotations

import json
import subprocess
import sys

import pytest

from ocdrl import __version__
from ocdrl.cli import main

FAST = ["--max-iterations", "2", "--max-stalls", "1", "--node-limit", "100"]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["simulate", "--n", "60", "--seed", "3", "--out", str(path)]) == 0
    return path


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSimulate:
    def test_writes_dataset_and_manifest(self, data):
        text = data.read_text().splitlines()
        assert text[0].startswith("x1,x2,d,y,e")
        assert len(text) == 61
        meta = json.loads(data.with_suffix(".manifest.json").read_text())
        assert meta["command"] == "simulate" and meta["dataset"]["rows"] == 60
        assert meta["dataset"]["reward_bound"] == 3.5

    def test_computational(self, tmp_path):
        out = tmp_path / "c.csv"
        assert main(["simulate", "--dgp", "computational", "--n", "30", "--out", str(out)]) == 0
        assert out.read_text().splitlines()[0].count(",") >= 20


class TestLearn:
    def test_outputs(self, data, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["learn", "--data", str(data), "--out", str(out)] + FAST) == 0
        policy = json.loads((out / "policy.json").read_text())
        assert policy["estimator"] == "ocdr" and policy["trace"] == "trace.jsonl"
        trace = (out / "trace.jsonl").read_text().splitlines()
        assert json.loads(trace[0])["nu"] == 0 and "wall_time" not in trace[-1]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["max_iterations"] == 2
        assert "objective" in capsys.readouterr().out

    def test_timing_adds_wall_times(self, data, tmp_path):
        out = tmp_path / "run"
        assert main(["learn", "--data", str(data), "--out", str(out), "--timing"] + FAST) == 0
        assert "wall_time" in (out / "trace.jsonl").read_text().splitlines()[-1]

    def test_config_and_override(self, data, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[learn]\nmethod = drl\n\n[pip]\nmax_iterations = 1\nnode_limit = 50\n")
        out = tmp_path / "run"
        assert main(["--config", str(cfg), "learn", "--data", str(data), "--out", str(out),
                     "--max-iterations", "2"]) == 0
        resolved = json.loads((out / "manifest.json").read_text())["config"]
        assert resolved["method"] == "drl" and resolved["max_iterations"] == 2
        assert resolved["node_limit"] == 50
        assert json.loads((out / "policy.json").read_text())["estimator"] == "dr"

    def test_bad_config_value(self, data, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[pip]\nmax_iterations = many\n")
        assert main(["--config", str(cfg), "learn", "--data", str(data)]) == 2

    def test_missing_propensity_model(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,d,y,e\n0.1,1,0.5,0.5\n0.2,2,0.5,0.5\n0.3,1,0.2,0.5\n")
        assert main(["learn", "--data", str(path), "--out", str(tmp_path / "o")]) == 2


class TestThreshold:
    def test_prints_and_checks(self, data, tmp_path, capsys):
        pol = tmp_path / "p.json"
        pol.write_text(json.dumps({"coefficients": [[1.0, 0.5], [-0.5, 1.0], [-0.5, -0.5]],
                                   "base_scores": [0.0, 0.0, 0.0]}))
        out = tmp_path / "t"
        assert main(["threshold", "--data", str(data), "--policy", str(pol), "--oracle",
                     "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "tau_hat = " in text and "oracle tau = " in text and "np.float64" not in text
        report = json.loads((out / "threshold.json").read_text())
        assert report["tau"] == report["oracle_tau"]
        assert len(report["grid"]) == len(report["objective"]) == 61

    def test_wrong_dimension(self, data, tmp_path):
        pol = tmp_path / "p.json"
        pol.write_text(json.dumps({"coefficients": [[1.0], [0.0], [0.0]], "base_scores": [0, 0, 0]}))
        assert main(["threshold", "--data", str(data), "--policy", str(pol)]) == 2


class TestExitCodes:
    def test_usage_errors(self, tmp_path):
        assert main(["learn", "--data", str(tmp_path / "missing.csv")]) == 2
        assert main(["learn", "--method", "switch"]) == 2
        assert main(["bench", "--methods", "switch", "--out", str(tmp_path / "b")]) == 2
        assert main(["--config", str(tmp_path / "none.ini"), "simulate"]) == 2

    def test_invalid_data(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,d,y,e\n0.1,1,0.5,0\n")
        assert main(["threshold", "--data", str(path), "--policy", str(path)]) == 2

    def test_version_via_module(self):
        res = subprocess.run([sys.executable, "-m", "ocdrl", "--version"],
                             capture_output=True, text=True, check=False)
        assert res.returncode == 0 and __version__ in res.stdout


class TestBench:
    def test_small_grid(self, tmp_path, capsys):
        out = tmp_path / "b"
        args = ["bench", "--n", "30", "--seeds", "1", "--test-size", "200", "--out", str(out)] + FAST
        assert main(args) == 0
        assert {"results.csv", "aggregate.csv", "ordering.json", "manifest.json"} <= \
            {p.name for p in out.iterdir()}
        manifest = json.loads((out / "manifest.json").read_text())
        assert "jobs" not in manifest["config"]
        assert "N=30" in capsys.readouterr().out
