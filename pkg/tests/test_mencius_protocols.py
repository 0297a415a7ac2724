from dataclasses import replace

from consensuslab import mencius_protocols as mc
from consensuslab import multipaxos as mp
from consensuslab.core import NOOP, Action, Command, Entry, QuorumSystem

QS = QuorumSystem.majority(3)
PUT = Command("write", "k", "v")


def test_default_leader_is_round_robin():
    assert mc.default_leader(4, 3) == 1
    assert mc.default_leader(0, 3) == 0
    assert mc.default_leader(3, 3) == mc.default_leader(0, 3)


def test_replicas_start_promised_to_the_default_leader():
    states = [mc.init_coord(x, 3, group=1) for x in range(3)]
    assert [s.base.ballot for s in states] == [1, 1, 1]
    assert [s.base.leader for s in states] == [False, True, False]
    assert mc.is_default(states[1], 3) and not mc.is_default(states[0], 3)


def test_owner_may_propose_commands():
    s = mc.init_coord(1, 3, group=1)
    s2, (acc, _ack) = mc.perform(s, Action("Propose", 1, (0, PUT)), QS)
    assert acc == mc.TaggedAccept(mp.Accept(1, 0, 1, PUT), False)
    _, (skip, _) = mc.perform(s, Action("Propose", 1, (1, NOOP)), QS)
    assert skip.skip is True


def recovery_leader():
    s = mc.init_coord(0, 3, group=1)
    return replace(s, base=replace(s.base, ballot=3, leader=True))


def test_recovery_leader_only_skips_with_untagged_noops():
    s = recovery_leader()
    assert mc.perform(s, Action("Propose", 0, (0, PUT)), QS) is None
    s2, (acc, _) = mc.perform(s, Action("Propose", 0, (0, NOOP)), QS)
    assert acc.skip is False and 0 not in s2.executable


def test_marking_nondefault_skips_is_the_seeded_bug():
    _, (acc, _) = mc.perform(recovery_leader(), Action("Propose", 0, (0, NOOP)), QS, frozenset({"mark_nondefault_skip"}))
    assert acc.skip is True


def test_merge_skip_tags_follows_the_highest_entry():
    low = mc.TaggedPromise(mp.PrepareOK(0, 3, (Entry(1, -1, NOOP),), 0), (True,))
    high = mc.TaggedPromise(mp.PrepareOK(2, 3, (Entry(2, -1, NOOP),), 0), (False,))
    assert mc.merge_skip_tags([low, high], 0, 0, 3) == {0: False}
    assert mc.merge_skip_tags([low], 0, 0, 3) == {0: True}
    empty = mc.TaggedPromise(mp.PrepareOK(1, 3, (), -1), ())
    assert mc.merge_skip_tags([empty], 0, 0, 3) == {0: False}


def test_accepting_a_skip_marks_it_executable():
    s = mc.init_coord(2, 3, group=1)
    s2, _ = mc.perform(s, Action("Accept", 2, (mc.TaggedAccept(mp.Accept(1, 0, 1, NOOP), True),)), QS)
    assert 0 in s2.executable
    assert mc.executable_prefix(s2, []) == 0
    assert mc.executable_prefix(s2, [1, 2]) == 2


def test_skip_safety_check():
    s = mc.init_coord(0, 3, group=1)
    bad = [replace(s, executable=frozenset({0}))] + [
        replace(mc.init_coord(x, 3, group=1), base=replace(mp.init_state(x), votes=(frozenset({(3, PUT)}),)))
        for x in (1, 2)
    ]
    assert mc.check_skip_safety(bad, QS) is not None
    assert mc.check_skip_safety([mc.init_coord(x, 3) for x in range(3)], QS) is None
