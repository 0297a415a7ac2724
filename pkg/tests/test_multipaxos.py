from dataclasses import replace

from hypothesis import given, settings, strategies as st

from consensuslab import multipaxos as mp
from consensuslab.core import EMPTY, NOOP, Action, Command, Entry, QuorumSystem

QS = QuorumSystem.majority(3)
A = Command("write", "x", "A")
B = Command("write", "x", "B")


def leader(me=1, ballot=4, log=()):
    return replace(mp.init_state(me), ballot=ballot, leader=True, log=log, log_tail=len(log) - 1)


def test_increase_ballot():
    s = replace(mp.init_state(1), ballot=0)
    assert mp.increase_ballot(s, 4) == replace(s, ballot=4)
    assert mp.increase_ballot(leader(ballot=4), 7).leader is False
    assert mp.increase_ballot(replace(s, ballot=4), 4) is None


def test_phase1a_emits_prepare_and_self_reply():
    s = replace(mp.init_state(1), ballot=4)
    prep, own = mp.phase1a(s, 3)
    assert prep == mp.Prepare(1, 4)
    assert own == mp.PrepareOK(1, 4, (), -1)
    assert mp.phase1a(s, 3) == (prep, own)
    assert mp.phase1a(leader(), 3) is None


def test_phase1b():
    s = replace(mp.init_state(0), ballot=0)
    s2, ok = mp.phase1b(s, mp.Prepare(1, 4))
    assert s2.ballot == 4 and ok == mp.PrepareOK(0, 4, (), -1)
    assert mp.phase1b(replace(s, ballot=4), mp.Prepare(1, 4)) is None
    logged = replace(s, log=(Entry(1, -1, A),), log_tail=0)
    _, ok = mp.phase1b(logged, mp.Prepare(1, 7))
    assert ok.log[0] == Entry(1, -1, A)


def test_become_leader_adopts_highest_ballot_value():
    s = replace(mp.init_state(0), ballot=6)
    replies = [mp.PrepareOK(0, 6, (Entry(1, -1, A),), 0), mp.PrepareOK(1, 6, (Entry(3, -1, B),), 0)]
    s2 = mp.become_leader(s, replies, QS)
    assert s2.leader and s2.log[0] == Entry(3, -1, B)


def test_become_leader_with_empty_replies_keeps_log():
    s = replace(mp.init_state(0), ballot=6)
    s2 = mp.become_leader(s, [mp.PrepareOK(0, 6, (), -1), mp.PrepareOK(2, 6, (), -1)], QS)
    assert s2.leader and s2.log == ()


def test_become_leader_guards():
    s = replace(mp.init_state(0), ballot=6)
    assert mp.become_leader(s, [mp.PrepareOK(0, 6, (), -1)], QS) is None  # no quorum
    assert mp.become_leader(s, [mp.PrepareOK(1, 6, (), -1), mp.PrepareOK(2, 6, (), -1)], QS) is None  # no self
    assert mp.become_leader(s, [mp.PrepareOK(0, 6, (), -1), mp.PrepareOK(1, 3, (), -1)], QS) is None  # mixed


def test_propose():
    s2, msg, ack = mp.propose(leader(), 0, A)
    assert msg == mp.Accept(1, 0, 4, A)
    assert ack == mp.AcceptOK(1, 0, 4, A)
    assert s2.entry(0) == Entry(4, -1, A)
    assert mp.propose(s2, 0, B) is None
    assert mp.propose(s2, 0, A) is not None
    assert mp.propose(replace(s2, leader=False), 1, A) is None


def test_accept():
    s = replace(mp.init_state(0), ballot=4)
    s2, ok = mp.accept(s, mp.Accept(1, 0, 4, A))
    assert s2.entry(0) == Entry(4, -1, A) and ok == mp.AcceptOK(0, 0, 4, A)
    assert mp.accept(replace(s, ballot=8), mp.Accept(1, 0, 4, A)) is None
    demoted, _ = mp.accept(leader(me=0, ballot=0), mp.Accept(1, 0, 3, A))
    assert demoted.leader is False


def test_learn_needs_a_quorum_of_matching_acks():
    s = mp.init_state(2)
    acks = [mp.AcceptOK(0, 0, 4, A), mp.AcceptOK(1, 0, 4, A)]
    assert mp.learn(s, acks, QS).chosen_at(0) == A
    assert mp.learn(s, acks[:1], QS) is None
    assert mp.learn(s, [acks[0], mp.AcceptOK(1, 0, 4, B)], QS) is None
    assert mp.learn(s, acks[:1], QS, frozenset({"learn_with_f"})).chosen_at(0) == A


def test_learn_leaves_the_log_alone():
    s = mp.learn(mp.init_state(2), [mp.AcceptOK(0, 0, 4, A), mp.AcceptOK(1, 0, 4, A)], QS)
    assert s.entry(0) == EMPTY


def test_agreement_check_flags_two_chosen_values():
    a = replace(mp.init_state(0), votes=(frozenset({(0, A)}),))
    b = replace(mp.init_state(1), votes=(frozenset({(0, A), (4, B)}),))
    c = replace(mp.init_state(2), votes=(frozenset({(4, B)}),))
    assert mp.check_agreement([a, b, c], QS) is not None
    assert mp.check_one_value_per_ballot([a, b, c]) is None
    bad = replace(mp.init_state(2), votes=(frozenset({(0, B)}),))
    assert mp.check_one_value_per_ballot([a, bad]) is not None


def test_perform_rejects_unknown_action():
    import pytest

    with pytest.raises(ValueError):
        mp.perform(mp.init_state(0), Action("Explode", 0), QS)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 6), st.sampled_from([A, B, NOOP])), max_size=25))
def test_accepts_never_lower_the_ballot_or_lose_votes(msgs):
    s = mp.init_state(0)
    for src, bal, v in msgs:
        out = mp.accept(s, mp.Accept(src, 0, bal, v))
        if out is None:
            assert bal < s.ballot
            continue
        s2, _ = out
        assert s2.ballot >= s.ballot
        assert s.votes_at(0) <= s2.votes_at(0)
        assert mp.check_logs_consistent([s2]) is None
        s = s2
