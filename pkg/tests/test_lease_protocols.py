from dataclasses import replace

from consensuslab import lease_protocols as lp
from consensuslab import multipaxos as mp
from consensuslab import raftstar as rs
from consensuslab.core import Action, Command, Entry, QuorumSystem

QS = QuorumSystem.majority(3)
A = Command("write", "k", "A")
R = Command("read", "k", "r")


def test_grant_sets_deadline_and_leaves_base_alone():
    s = lp.init_pql(0, 3)
    s2, grant = lp.grant_lease(s, 2, 10, 2000)
    assert s2.granted[2] == 2010 and grant.deadline == 2010
    assert s2.base == s.base


def test_quorum_lease_activity():
    assert lp.lease_is_active([(5, 5, 5), (5, 5, 5), (-1, -1, -1)], 2, QS, 3)
    assert not lp.lease_is_active([(-1, -1, 5), (-1, -1, -1), (-1, -1, -1)], 2, QS, 3)
    assert not lp.lease_is_active([(5, 5, 5), (5, 5, 5), (5, 5, 5)], 2, QS, 6)


def test_held_lease_counts_once_activated():
    s = lp.init_raft_pql(2, 3)
    for grantor in (0, 1):
        s = lp.receive_lease(s, lp.LeaseGrant(grantor, 2, 100, -1), 0)
    assert lp.holds_quorum_lease(s, QS, 50)
    assert not lp.holds_quorum_lease(s, QS, 101)
    gated = lp.receive_lease(lp.init_raft_pql(2, 3), lp.LeaseGrant(0, 2, 100, 3), 0)
    assert lp.valid_leases(gated, 0) == []


def holder_with_lease(base):
    s = lp.LeaseState(base, (-1,) * 3, ((100, -1), (100, -1), (-1, -1)))
    return s


def test_local_read_guards():
    clean = holder_with_lease(rs.init_state(2))
    assert lp.read_ready(clean, "k", QS, 0)
    pending = holder_with_lease(replace(rs.init_state(2), log=(Entry(1, 1, A),), last_index=0, log_tail=0))
    assert not lp.read_ready(pending, "k", QS, 0)
    assert lp.read_ready(pending, "other", QS, 0)
    assert lp.read_ready(pending, "k", QS, 0, frozenset({"skip_commit_guard"}))
    no_lease = lp.init_raft_pql(2, 3)
    assert not lp.read_ready(no_lease, "k", QS, 0)


def test_local_read_step_emits_nothing():
    s = holder_with_lease(rs.init_state(2))
    assert lp.perform(s, Action("LocalRead", 2, ("k", 0)), QS) == (s, ())


def test_apply_is_sequential_and_gated():
    s = replace(lp.init_raft_pql(0, 3), base=replace(rs.init_state(0), commit=3))
    s1 = lp.apply(s, 0)
    assert s1.apply_index == 0
    assert lp.apply(s1, 2) is None
    assert lp.apply(replace(s, base=rs.init_state(0)), 0) is None


def test_learn_waits_for_live_holders():
    s = lp.LeaseState(
        replace(rs.init_state(0), term=0, leader=True, log=(Entry(0, 0, A),), last_index=0, log_tail=0),
        (100, -1, 100),
        ((-1, -1),) * 3,
    )
    ack1 = lp.LeaseAck(rs.AppendOK(1, 0, 0), frozenset())
    assert lp.raft_pql_learn(s, [ack1], QS, 0) is None  # leader granted s2 a lease, no ack from s2
    ack2 = lp.LeaseAck(rs.AppendOK(2, 0, 0), frozenset())
    assert lp.raft_pql_learn(s, [ack1, ack2], QS, 0).base.commit == 0
    assert lp.raft_pql_learn(s, [ack1], QS, 0, frozenset({"skip_holder_wait"})).base.commit == 0
    plain = replace(s, granted=(-1, -1, -1))
    assert lp.raft_pql_learn(plain, [ack1], QS, 0).base.commit == 0


def test_pql_learn_uses_holders_named_in_acks():
    s = lp.init_pql(0, 3)
    acks = [lp.LeaseAck(mp.AcceptOK(a, 0, 0, A), frozenset({(2, 50)})) for a in (0, 1)]
    assert lp.pql_learn(s, acks, QS, 10) is None
    assert lp.pql_learn(s, acks, QS, 60).base.chosen_at(0) == A


def test_lease_holder_never_logs_reads():
    leader = replace(mp.init_state(0), ballot=0, leader=True)
    s = lp.LeaseState(leader, (-1,) * 3, ((100, -1), (100, -1), (-1, -1)))
    assert lp.perform(s, Action("Propose", 0, (0, R, 0)), QS) is None
    assert lp.perform(s, Action("Propose", 0, (0, A, 0)), QS) is not None


def test_classification_and_projection():
    assert lp.classify("pql", "GrantLease") == "added"
    assert lp.classify("pql", "Accept") == "modified"
    assert lp.classify("raftstar-pql", "RequestVote") == "unchanged"
    assert lp.project_action(Action("GrantLease", 0, (1, 0, 2))) is None
    assert lp.project_action(Action("Accept", 0, ("m", 7))) == Action("Accept", 0, ("m",))
    ack = lp.LeaseAck(mp.AcceptOK(0, 0, 0, A), frozenset({(1, 5)}))
    assert lp.project_msg(ack) == mp.AcceptOK(0, 0, 0, A)


def test_grant_bumps_ballot_changes_the_base():
    s = replace(lp.init_pql(0, 3), base=replace(mp.init_state(0), ballot=0))
    s2, _ = lp.perform(s, Action("GrantLease", 0, (1, 0, 2)), QS, frozenset({"grant_bumps_ballot"}))
    assert s2.base.ballot == 1
    s3, _ = lp.perform(s, Action("GrantLease", 0, (1, 0, 2)), QS)
    assert s3.base == s.base


def test_runtime_lease_inv_flags_a_holder_missing_a_commit():
    def server(me, votes, commit=-1, held=((-1, -1),) * 3):
        log = (Entry(0, 0, A),) if votes else ()
        base = replace(
            rs.init_state(me), term=0, log=log, last_index=len(log) - 1, log_tail=len(log) - 1,
            commit=commit, votes=((frozenset({(0, A)}),) if votes else ()),
        )
        return lp.LeaseState(base, (-1,) * 3, held)

    holder_held = ((100, -1), (100, -1), (-1, -1))
    states = [server(0, True, 0), server(1, True), server(2, False, held=holder_held)]
    assert "lease holder 2" in lp.check_runtime_lease_inv(states, QS, 0)
    states[2] = server(2, True, held=holder_held)
    assert lp.check_runtime_lease_inv(states, QS, 0) is None
