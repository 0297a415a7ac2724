import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from consensuslab.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def trace(runner, tmp_path):
    out = tmp_path / "trace.jsonl"
    r = runner.invoke(main, ["run", "-c", str(CONFIGS / "raftstar-pql.json"), "--seed", "3", "-o", str(out)])
    assert r.exit_code == 0, r.output
    doc = json.loads(r.output)
    assert doc["seed"] == 3 and doc["completed"] == doc["issued"]
    return out


def test_check_defaults_to_parent_maps(runner, trace):
    r = runner.invoke(main, ["check", str(trace)])
    assert r.exit_code == 0, r.output
    assert "map raftstar-pql:raftstar: ok" in r.output and "map raftstar-pql:pql: ok" in r.output


def test_mutated_map_exits_one(runner, trace):
    assert runner.invoke(main, ["check", str(trace), "--mutated-map"]).exit_code == 1


def test_wrong_map_is_a_usage_error(runner, trace):
    assert runner.invoke(main, ["check", str(trace), "--map", "raftstar:paxos"]).exit_code == 2


def test_replay(runner, trace):
    r = runner.invoke(main, ["replay", str(trace)])
    assert r.exit_code == 0 and "identical" in r.output
    assert runner.invoke(main, ["replay", str(trace), "--flag", "skip_holder_wait"]).exit_code == 2
    lines = trace.read_text().splitlines()
    trace.write_text("\n".join(lines[:-1]) + "\n")
    assert runner.invoke(main, ["replay", str(trace)]).exit_code == 1


def test_bad_config_is_a_usage_error(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"protocol": "raftstar", "n": 0}))
    assert runner.invoke(main, ["run", "-c", str(bad)]).exit_code == 2
    assert runner.invoke(main, ["run"]).exit_code == 2


def test_seeded_bug_run_exits_one(runner):
    r = runner.invoke(main, ["run", "-c", str(CONFIGS / "raftstar-pql.json"), "--protocol", "pql",
                             "--flag", "skip_holder_wait"])
    assert r.exit_code == 1
    assert json.loads(r.output)["invariant-violations"]


def test_explore(runner):
    base = ["explore", "--protocol", "raftstar", "--values", "1", "--max-round", "1", "--max-index", "0"]
    r = runner.invoke(main, base + ["--map", "raftstar:paxos"])
    assert r.exit_code == 0, r.output
    doc = json.loads(r.output)
    assert (doc["states"], doc["edges"]) == (131, 261)
    assert runner.invoke(main, base + ["--map", "pql:paxos"]).exit_code == 2
    r = runner.invoke(main, ["explore", "--protocol", "raftstar", "--flag", "skip_prev_term_check", "--stop-at-first"])
    assert r.exit_code == 1
    assert json.loads(r.output)["failures"][0]["check"] == "log_matching"
