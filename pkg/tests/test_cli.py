import csv
import json
import subprocess
import sys

import pytest

from gpucoro.cli import main
from gpucoro.policies import POLICIES

PAIR = {"devices": [{"id": "g", "tiers": [1, "1/2", "1/2"]}],
        "workload": {"jobs": [{"id": j, "kernels": [{"duration": 1, "saturation": 1,
                                                     "launch_delay": 1}], "repeat": 4}
                              for j in "ab"]}}


def _write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_simulate_empty(tmp_path, capsys):
    path = _write(tmp_path, "empty.json", {})
    assert main(["simulate", path]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["metrics"]["completed_requests"] == 0 and out["events"] == 0


def test_simulate_writes_artifacts(tmp_path, capsys):
    path = _write(tmp_path, "pair.json", PAIR)
    log, out = tmp_path / "events.jsonl", tmp_path / "res"
    assert main(["simulate", path, "--policy", "temporal", "--log", str(log),
                 "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["policy"] == "temporal"
    lines = log.read_text().splitlines()
    assert len(lines) == metrics["events"] and all(json.loads(x)["t"] for x in lines)
    rows = list(csv.DictReader(open(out / "metrics_kernels.csv")))
    assert len(rows) == 8


def test_simulate_is_reproducible(tmp_path, capsys):
    path = _write(tmp_path, "pair.json", PAIR)
    logs = []
    for i in range(2):
        log = tmp_path / f"e{i}.jsonl"
        assert main(["simulate", path, "--seed", "3", "--log", str(log)]) == 0
        logs.append(log.read_bytes())
    assert logs[0] == logs[1]


def test_missing_file_exit_2(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_policy_exit_2(tmp_path, capsys):
    path = _write(tmp_path, "pair.json", PAIR)
    assert main(["simulate", path, "--policy", "fifo-magic"]) == 2
    err = capsys.readouterr().err
    assert all(name in err for name in POLICIES)
    bad = _write(tmp_path, "bad.json", dict(PAIR, policy="nope"))
    assert main(["simulate", bad]) == 2


def test_malformed_config_exit_2(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["simulate", str(p)]) == 2
    assert main(["simulate", _write(tmp_path, "odd.json", {"devics": []})]) == 2


def test_divergence_sweep_rows(tmp_path):
    assert main(["divergence-sweep", "--format", "fp16", "--n", "4096",
                 "--splits", "1,2,4,8,16,32,64", "--seeds", "100", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 100 * 7
    assert {r["g_j"] for r in rows} == {"1", "2", "4", "8", "16", "32", "64"}


def test_sweep_bad_splits(capsys):
    assert main(["divergence-sweep", "--splits", "0,2"]) == 2
    assert main(["divergence-sweep", "--splits", "a"]) == 2


def test_compare_structure(tmp_path, capsys):
    t = _write(tmp_path, "temporal.json", dict(PAIR, policy="temporal", params={"quantum": 2}))
    d = _write(tmp_path, "detshare.json", dict(PAIR, policy="slo-aware"))
    assert main(["compare", t, d, "--out", str(tmp_path / "cmp.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["runs"]) == {"temporal", "detshare"}
    for run in out["runs"].values():
        assert set(run["normalized_throughput"]) == {"a", "b"}
    assert json.loads((tmp_path / "cmp.json").read_text()) == out


def test_console_module_runs(tmp_path):
    path = _write(tmp_path, "empty.json", {})
    r = subprocess.run([sys.executable, "-m", "gpucoro.cli", "simulate", path],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["events"] == 0
