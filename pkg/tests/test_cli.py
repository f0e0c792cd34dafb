import hashlib
import json
import os

import pytest

from vsrstab import cli
from vsrstab.cli import run


def files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


def test_example_exit_zero(tmp_path):
    assert run(["example", "--M", "1", "--K", "0.025", "--seed", "0", "--x-points", "401",
                "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "example.json").read_text())
    assert rep["certification"]["min_margin"] >= 0
    assert rep["envelope"]["violations"] == []
    assert (tmp_path / "coefficients.csv").read_text().startswith("arg,value\n")


def test_certify_identity_violates(tmp_path):
    assert run(["certify", "--model", "identity", "--V", "pow(s,2)", "--alpha3", "pow(s,2)", "--mode", "rss",
                "--E", "0", "--seed", "1", "--out", str(tmp_path)]) == 1
    rep = json.loads((tmp_path / "certify.json").read_text())
    assert rep["decrease"]["verdict"] == "ViolatedAt"


def test_certify_paper_ok_and_period_search(tmp_path):
    assert run(["certify", "--seed", "0", "--out", str(tmp_path / "a")]) == 0
    assert run(["certify", "--seed", "0", "--search-T-hi", "0.3", "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "certify.json").read_text())
    assert rep["period_search"]["T_max_certified"] >= 0.0677


def test_inconclusive_exit_code(tmp_path):
    # no period samples at all: nothing was checked, so the verdict is inconclusive
    assert run(["certify", "--grid", '{"T_points": 0}', "--seed", "0", "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["certify", "--M", "abc"],
    ["certify", "--grid", "{not json"],
    ["simulate", "--model", "nonsense", "--seed", "1"],
    ["certify", "--mode", "weird", "--seed", "1"],
    ["falsify", "--claim", "/nonexistent/claim.json", "--seed", "1"],
])
def test_config_errors(argv, tmp_path, capsys):
    assert run(argv + ["--out", str(tmp_path)] if argv and argv[0] != "bogus" else argv) == 64
    assert "error" in capsys.readouterr().err


def test_unknown_config_field(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "probe", "bogus": 1}))
    assert run(["probe", "--config", str(cfg), "--out", str(tmp_path)]) == 64
    cfg.write_text(json.dumps({"command": "certify"}))
    assert run(["probe", "--config", str(cfg), "--out", str(tmp_path)]) == 64


def test_internal_error(monkeypatch, tmp_path):
    def boom(runner):
        raise RuntimeError("kaboom")

    monkeypatch.setitem(cli.HANDLERS, "probe", boom)
    assert run(["probe", "--seed", "1", "--out", str(tmp_path)]) == 70


def test_structural_and_origin(tmp_path):
    assert run(["structural", "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "structural.json").read_text())
    assert rep["origin_residual"] == 0 and rep["delta_monotone"] and rep["C_monotone"]
    assert run(["structural", "--model", "drift", "--out", str(tmp_path / "b")]) == 1


def test_resolved_config_is_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["probe", "--seed", "5", "--count", "50", "--horizon", "80", "--out", str(a)]) == 0
    cfg = a / "resolved_config.json"
    before = hashlib.sha256(cfg.read_bytes()).hexdigest()
    assert run(["probe", "--config", str(cfg), "--out", str(b)]) == 0
    assert hashlib.sha256(cfg.read_bytes()).hexdigest() == before  # input untouched
    assert files(a) == files(b)


def test_seed_recorded_when_absent(tmp_path):
    assert run(["probe", "--count", "10", "--horizon", "10", "--out", str(tmp_path)]) == 0
    assert isinstance(json.loads((tmp_path / "resolved_config.json").read_text())["seed"], int)


def test_falsify_witness_replay(tmp_path):
    claim = {"type": "envelope", "beta": "2*s*exp(-t)", "M0": 1.0, "T_bound": 0.1}
    out = tmp_path / "f"
    assert run(["falsify", "--model", "growth", "--claim", json.dumps(claim), "--seed", "0",
                "--budget", '{"restarts": 1, "iterations": 0}', "--out", str(out)]) == 1
    wit = out / "witness.json"
    w = json.loads(wit.read_text())
    assert run(["simulate", "--witness", str(wit), "--seed", "0", "--out", str(tmp_path / "s")]) == 1
    rep = json.loads((tmp_path / "s" / "simulate.json").read_text())
    assert rep["replayed_violation"] == w["violation"]
    assert (tmp_path / "s" / "traj.csv").read_text().startswith("k,t,x1,e1,T\n")


def test_falsify_paper_no_counterexample(tmp_path):
    assert run(["falsify", "--seed", "0", "--budget", '{"restarts": 300, "iterations": 5, "horizon": 50}',
                "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "falsify.json").read_text())["result"] == "NoCounterexampleFound"


def test_simulate_and_bounds(tmp_path):
    assert run(["simulate", "--x0", "[1.0]", "--periods-spec", '{"mode": "constant", "T_max": 0.1, "theta": 0.5}',
                "--K-steps", "2", "--seed", "0", "--out", str(tmp_path / "s")]) == 0
    rows = (tmp_path / "s" / "traj.csv").read_text().splitlines()
    assert float(rows[3].split(",")[2]) == pytest.approx(0.7460875)
    assert run(["bounds", "--seed", "3", "--E0", "0.025", "--ensemble", '{"count": 200, "horizon": 100}',
                "--out", str(tmp_path / "b")]) == 0
    env = json.loads((tmp_path / "b" / "envelope.json").read_text())
    assert env["violations"] == [] and env["checked_points"] == 200 * 101
    assert (tmp_path / "b" / "gamma.csv").exists()


@pytest.mark.parametrize("argv", [
    ["probe", "--count", "80", "--horizon", "60"],
    ["bounds", "--ensemble", '{"count": 600, "horizon": 50}'],
    ["falsify", "--budget", '{"restarts": 700, "iterations": 3, "horizon": 30}'],
])
def test_workers_byte_identical(argv, tmp_path):
    assert run(argv + ["--seed", "4", "--workers", "1", "--out", str(tmp_path / "w1")]) == 0
    assert run(argv + ["--seed", "4", "--workers", "8", "--out", str(tmp_path / "w8")]) == 0
    assert files(tmp_path / "w1") == files(tmp_path / "w8")
