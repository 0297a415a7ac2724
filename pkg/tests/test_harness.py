import json

import pytest

from consensuslab import harness
from consensuslab.config import SimConfig


def cfg(**kw):
    doc = {"protocol": "raftstar", "seed": 5, "workload": {"ops-per-client": 4, "duration-ticks": 10000}}
    doc.update(kw)
    return SimConfig.model_validate(doc)


@pytest.fixture
def trace(tmp_path):
    path = tmp_path / "t.jsonl"
    harness.run(cfg(protocol="raftstar-pql"), path)
    return path


def test_replay_reproduces_the_final_digests(trace):
    first = harness.load_trace(trace)[-1]["final"]
    assert harness.replay(trace).final == first
    assert harness.replay(trace, flags=[]).records == len(harness.load_trace(trace))


def test_replay_refuses_different_flags(trace):
    with pytest.raises(harness.ReplayRefused):
        harness.replay(trace, flags=["skip_holder_wait"])


def test_truncated_trace_is_reported_at_the_first_missing_record(trace):
    lines = trace.read_text().splitlines()
    trace.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(harness.TruncatedTrace) as exc:
        harness.replay(trace)
    assert exc.value.seq == len(lines) - 3


def test_edited_record_diverges(trace):
    recs = harness.load_trace(trace)
    k = next(i for i, r in enumerate(recs) if r["type"] == "step")
    recs[k]["post"] = "0" * 16
    trace.write_text("".join(json.dumps(r) + "\n" for r in recs))
    with pytest.raises(harness.ReplayDivergence):
        harness.replay(trace)


def test_tampered_header_is_refused(trace):
    recs = harness.load_trace(trace)
    recs[0]["seed"] = 999
    trace.write_text("".join(json.dumps(r) + "\n" for r in recs))
    with pytest.raises(harness.ReplayRefused):
        harness.replay(trace)


def test_trace_counts_every_send(trace):
    recs = harness.load_trace(trace)
    sends = sum(1 for r in recs if r["type"] == "send")
    res = harness.replay(trace)
    assert sends == res.sim.messages > 0


def test_check_runs_every_checker(trace):
    report = harness.check(trace, harness.parent_maps("raftstar-pql"))
    assert report.passed
    assert {v.map for v in report.verdicts} == {"raftstar-pql:raftstar", "raftstar-pql:pql"}
    assert report.consistency.reads > 0
    assert not harness.check(trace, ["raftstar-pql:pql"], mutated_map=True).passed


def test_map_for_another_protocol_is_a_usage_error(trace):
    with pytest.raises(harness.UsageError):
        harness.check(trace, ["raftstar:paxos"])


def test_hundred_writes_commit_everywhere():
    c = cfg(workload={"clients-per-site": 1, "read-ratio": 0.0, "ops-per-client": 34, "duration-ticks": 60000},
            timing={"max-ticks": 200000})
    res = harness.run(c, check_invariants=True)
    sim = res.sim
    assert res.metrics.completed == res.metrics.issued == 102
    assert len(sim.effect_tick) == 102
    assert sim.kv[0] == sim.kv[1] == sim.kv[2]
    assert not sim.violations and not harness.state_machine_safety(sim)


def test_fault_free_commit_takes_one_round_trip():
    res = harness.run(cfg(rtt=50))
    assert res.metrics.commit_latency and set(res.metrics.commit_latency) == {100}


def test_write_only_history_is_vacuously_consistent():
    recs = [{"type": "invoke", "op": "w", "tick": 0},
            {"type": "commit", "op": "w", "position": 0, "tick": 5, "kind": "write", "key": "k"}]
    assert harness.read_consistency_check(recs).consistent


def test_stale_read_is_flagged():
    recs = [
        {"type": "invoke", "op": "w1", "tick": 0},
        {"type": "commit", "op": "w1", "position": 0, "tick": 5, "kind": "write", "key": "k"},
        {"type": "invoke", "op": "w2", "tick": 6},
        {"type": "commit", "op": "w2", "position": 1, "tick": 10, "kind": "write", "key": "k"},
        {"type": "invoke", "op": "r", "tick": 20},
        {"type": "response", "op": "r", "tick": 21, "kind": "read", "key": "k", "value": "w1", "local": True},
    ]
    report = harness.read_consistency_check(recs)
    assert report.reads == 1 and report.local_reads == 1
    assert "missed write w2" in report.violations[0]
    recs[-1]["value"] = "w2"
    assert harness.read_consistency_check(recs).consistent


def test_read_of_a_write_before_it_took_effect_is_flagged():
    recs = [
        {"type": "invoke", "op": "w", "tick": 0},
        {"type": "invoke", "op": "r", "tick": 1},
        {"type": "response", "op": "r", "tick": 2, "kind": "read", "key": "k", "value": "w"},
        {"type": "commit", "op": "w", "position": 0, "tick": 9, "kind": "write", "key": "k"},
    ]
    assert not harness.read_consistency_check(recs).consistent


def test_seeded_fault_configs_are_reproducible():
    a = harness.seeded_fault_config("raftstar-pql", 7)
    assert a == harness.seeded_fault_config("raftstar-pql", 7)
    assert a.faults.drop_probability <= 0.10 and len(a.faults.partitions) == 1
    assert a != harness.seeded_fault_config("raftstar-pql", 8)


def test_percentile_nearest_rank():
    assert harness.percentile([], 50) is None
    assert harness.percentile([5, 1, 3, 2, 4], 50) == 3
    assert harness.percentile(range(1, 101), 99) == 99
