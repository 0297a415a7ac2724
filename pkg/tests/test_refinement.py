from dataclasses import replace

import pytest

from consensuslab import raftstar as rs
from consensuslab.config import SimConfig
from consensuslab.core import NO_BALLOT, Action, Command, Entry, QuorumSystem
from consensuslab.harness import run
from consensuslab.refinement import (
    MAPS, Step, audit_non_mutation, build_map, map_raft_msg, map_raft_state, verify_steps,
)

QS = QuorumSystem.majority(3)
A = Command("write", "x", "A")
B = Command("write", "x", "B")


def test_raft_state_maps_term_to_ballot_and_commit_prefix_to_chosen():
    s = replace(rs.init_state(1), term=4, leader=True, log=(Entry(1, 1, A), Entry(4, 4, B)),
                last_index=1, log_tail=1, commit=0)
    p = map_raft_state(s)
    assert p.ballot == 4 and p.leader
    assert p.chosen == (A,)
    assert [e.bal for e in p.log] == [1, 4]
    assert all(e.term == NO_BALLOT for e in p.log)
    assert map_raft_state(s, chosen_full_log=True).chosen == (A, B)


def test_vote_messages_become_phase_one_messages():
    assert map_raft_msg(rs.RequestVote(2, 5, -1, -1)).bal == 5
    assert map_raft_msg(rs.AppendOK(1, 5, 0)) is None


def test_empty_trace_passes():
    v = verify_steps("raftstar:paxos", QS, [])
    assert v.passed and v.steps == 0 and v.classified == 1.0


def test_unknown_map_is_rejected():
    with pytest.raises(ValueError):
        build_map("paxos:raftstar", QS)


def test_every_map_names_a_concrete_and_abstract_protocol():
    assert MAPS["raftstar-pql:pql"] == ("raftstar-pql", "pql")
    assert MAPS["raftstar-mencius:coorpaxos"] == ("raftstar-mencius", "coorpaxos")


def simulate(protocol, seed=3, flags=()):
    cfg = SimConfig.model_validate({
        "protocol": protocol, "seed": seed, "flags": list(flags),
        "workload": {"ops-per-client": 4, "duration-ticks": 10000},
    })
    return run(cfg, keep_steps=True).sim


def test_fault_free_raft_run_refines_paxos_and_mutated_map_does_not():
    (steps,) = simulate("raftstar").steps
    good = verify_steps("raftstar:paxos", QS, steps)
    assert good.passed and good.ok > 0 and good.classified == 1.0
    bad = verify_steps("raftstar:paxos", QS, steps, mutated=True)
    assert not bad.passed


def test_learning_with_a_minority_fails_the_map():
    (steps,) = simulate("raftstar", flags=["learn_with_f"]).steps
    assert not verify_steps("raftstar:paxos", QS, steps).passed


def test_lease_layer_passes_the_audit():
    (steps,) = simulate("raftstar-pql").steps
    report = audit_non_mutation("raftstar-pql", steps)
    assert report.passed
    assert report.tags["GrantLease"] == "added"


def test_grant_that_bumps_the_ballot_is_caught():
    (steps,) = simulate("pql", flags=["grant_bumps_ballot"]).steps
    assert not audit_non_mutation("pql", steps).passed
    assert not verify_steps("pql:paxos", QS, steps).passed


def test_hand_built_step_that_changes_the_log_without_an_action_is_a_violation():
    s = rs.init_state(0)
    post = replace(s, log=(Entry(0, 0, A),), last_index=0, log_tail=0, term=0)
    others = (rs.init_state(1), rs.init_state(2))
    step = Step((s,) + others, Action("ReceiveVote", 0, (rs.RequestVote(1, 0, -1, -1),)), (post,) + others)
    assert not verify_steps("raftstar:paxos", QS, [step]).passed
