"""MultiPaxos replica as a pure state machine.

Every operation takes a replica state plus its input and returns the new state
and any outgoing message, or ``None`` when the operation's guard does not hold.
``votes`` is ghost history that only checkers read.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

from .core import (
    Action,
    EMPTY,
    NO_BALLOT,
    NO_INDEX,
    NOVAL,
    Entry,
    QuorumSystem,
    Value,
    highest_entry,
    proposer_of,
    put,
    slot,
)

NO_FLAGS: frozenset[str] = frozenset()


@dataclass(frozen=True, slots=True)
class PaxosState:
    me: int
    ballot: int = NO_BALLOT
    leader: bool = False
    log: tuple[Entry, ...] = ()
    log_tail: int = NO_INDEX
    chosen: tuple = ()  # index -> Value, None where unknown
    votes: tuple[frozenset, ...] = ()  # index -> {(bal, val)}

    def entry(self, i: int) -> Entry:
        return slot(self.log, i)

    def chosen_at(self, i: int) -> Value | None:
        return slot(self.chosen, i, None)

    def votes_at(self, i: int) -> frozenset:
        return slot(self.votes, i, frozenset())


# ---------------------------------------------------------------- messages


@dataclass(frozen=True, slots=True)
class Prepare:
    src: int
    bal: int


@dataclass(frozen=True, slots=True)
class PrepareOK:
    acc: int
    bal: int
    log: tuple[Entry, ...]
    log_tail: int

    @property
    def bal_or_term(self) -> int:
        return self.bal


@dataclass(frozen=True, slots=True)
class Accept:
    src: int
    index: int
    bal: int
    val: Value


@dataclass(frozen=True, slots=True)
class AcceptOK:
    acc: int
    index: int
    bal: int
    val: Value


def init_state(me: int) -> PaxosState:
    return PaxosState(me)


# --------------------------------------------------------------- phase 1


def increase_ballot(s: PaxosState, b: int) -> PaxosState | None:
    if b <= s.ballot:
        return None
    return replace(s, ballot=b, leader=False)


def phase1a(s: PaxosState, n: int) -> tuple[Prepare, PrepareOK] | None:
    """Prepare for the current ballot plus the locally synthesized self-reply."""
    if s.leader or proposer_of(s.ballot, n) != s.me:
        return None
    return Prepare(s.me, s.ballot), PrepareOK(s.me, s.ballot, s.log, s.log_tail)


def phase1b(s: PaxosState, m: Prepare) -> tuple[PaxosState, PrepareOK] | None:
    if m.bal <= s.ballot:
        return None
    s2 = replace(s, ballot=m.bal, leader=False)
    return s2, PrepareOK(s.me, m.bal, s.log, s.log_tail)


def merge_logs(logs: Iterable[tuple[Entry, ...]], lo: int, hi: int, n: int) -> dict[int, Entry]:
    logs = list(logs)
    return {i: highest_entry((slot(lg, i) for lg in logs), n) for i in range(lo, hi + 1)}


def replies_ok(s: PaxosState, replies: list, qs: QuorumSystem, n: int) -> bool:
    if not replies or proposer_of(s.ballot, n) != s.me:
        return False
    accs = {m.acc for m in replies}
    return (
        s.me in accs
        and all(m.bal == s.ballot for m in replies)
        and qs.contains_quorum(accs)
    )


def become_leader(s: PaxosState, replies: Iterable[PrepareOK], qs: QuorumSystem) -> PaxosState | None:
    """Adopt the highest-ballot entry per index among a quorum of replies."""
    replies = list(replies)
    n = qs.n
    if s.leader or not replies_ok(s, replies, qs, n):
        return None
    top = max(m.log_tail for m in replies)
    log = s.log
    for i, e in merge_logs((m.log for m in replies), 0, top, n).items():
        if e != EMPTY or i < len(log):
            log = put(log, i, e)
    return replace(s, log=log, log_tail=max(s.log_tail, top), leader=True)


# --------------------------------------------------------------- phase 2


def _vote(s: PaxosState, i: int, bal: int, val: Value) -> tuple[frozenset, ...]:
    return put(s.votes, i, s.votes_at(i) | {(bal, val)}, frozenset())


def accept(s: PaxosState, m: Accept) -> tuple[PaxosState, AcceptOK] | None:
    if m.bal < s.ballot:
        return None
    s2 = replace(
        s,
        ballot=m.bal,
        leader=s.leader and m.bal == s.ballot,
        log=put(s.log, m.index, Entry(m.bal, NO_BALLOT, m.val)),
        log_tail=max(s.log_tail, m.index),
        votes=_vote(s, m.index, m.bal, m.val),
    )
    return s2, AcceptOK(s.me, m.index, m.bal, m.val)


def propose(s: PaxosState, i: int, v: Value) -> tuple[PaxosState, Accept, AcceptOK] | None:
    """Phase 2a for slot ``i`` together with the leader's implicit self-accept."""
    if not s.leader or v is NOVAL or i < 0:
        return None
    cur = s.entry(i).val
    if cur is not NOVAL and cur != v:
        return None
    m = Accept(s.me, i, s.ballot, v)
    s2, ack = accept(s, m)
    return s2, m, ack


def learn(
    s: PaxosState, acks: Iterable[AcceptOK], qs: QuorumSystem, flags: frozenset[str] = NO_FLAGS
) -> PaxosState | None:
    """Record a value as chosen once a quorum of acceptors acknowledged it.

    Only ``chosen`` changes; the slot keeps whatever the replica last voted.
    """
    acks = list(acks)
    if not acks:
        return None
    i, b, v = acks[0].index, acks[0].bal, acks[0].val
    if any((a.index, a.bal, a.val) != (i, b, v) for a in acks):
        return None
    accs = {a.acc for a in acks}
    if "learn_with_f" in flags:
        enough = len(accs) >= qs.f
    else:
        enough = qs.contains_quorum(accs)
    if not enough or s.chosen_at(i) == v:
        return None
    return replace(s, chosen=put(s.chosen, i, v, None))


# ------------------------------------------------------------- invariants


def voted_for(s: PaxosState, i: int, b: int, v: Value) -> bool:
    return (b, v) in s.votes_at(i)


def chosen_at(states: Iterable[PaxosState], qs: QuorumSystem, i: int, b: int, v: Value) -> bool:
    voters = {s.me for s in states if (b, v) in s.votes_at(i)}
    return qs.contains_quorum(voters)


def chosen_values(states: Iterable[PaxosState], qs: QuorumSystem, i: int) -> set:
    """Values chosen at ``i`` at some ballot, computed from vote history."""
    states = list(states)
    pairs: dict[tuple, set[int]] = {}
    for s in states:
        for bv in s.votes_at(i):
            pairs.setdefault(bv, set()).add(s.me)
    return {v for (b, v), who in pairs.items() if qs.contains_quorum(who)}


def max_index(states: Iterable[PaxosState]) -> int:
    return max((max(len(s.log), len(s.votes), len(s.chosen)) for s in states), default=0) - 1


def check_agreement(states: list[PaxosState], qs: QuorumSystem) -> str | None:
    for i in range(max_index(states) + 1):
        vals = chosen_values(states, qs, i)
        learned = {s.chosen_at(i) for s in states} - {None}
        if len(vals | learned) > 1:
            return f"two values chosen at index {i}: {sorted(map(repr, vals | learned))}"
        for s in states:
            c = s.chosen_at(i)
            if c is not None and c not in vals:
                return f"server {s.me} learned {c!r} at {i} without a quorum of votes"
    return None


def check_one_value_per_ballot(states: list[PaxosState]) -> str | None:
    seen: dict[tuple[int, int], Value] = {}
    for s in states:
        for i, vs in enumerate(s.votes):
            for b, v in vs:
                prev = seen.setdefault((i, b), v)
                if prev != v:
                    return f"ballot {b} voted two values at index {i}"
    return None


def check_logs_consistent(states: list[PaxosState]) -> str | None:
    """Each log slot is a vote its owner actually cast, below its ballot."""
    for s in states:
        for i, e in enumerate(s.log):
            if e.val is NOVAL:
                if e.bal != NO_BALLOT:
                    return f"server {s.me} slot {i} has a ballot but no value"
                continue
            if e.bal > s.ballot:
                return f"server {s.me} slot {i} ballot {e.bal} above its ballot {s.ballot}"
    return None


# -------------------------------------------------------------- dispatch

ACTIONS = ("IncreaseBallot", "Phase1a", "Phase1b", "BecomeLeader", "Propose", "Accept", "Learn")


def perform(
    s: PaxosState, act: Action, qs: QuorumSystem, flags: frozenset[str] = NO_FLAGS
) -> tuple[PaxosState, tuple] | None:
    """Run ``act`` on its replica; returns the new state and emitted messages."""
    kind, args = act.kind, act.args
    if kind == "IncreaseBallot":
        s2 = increase_ballot(s, *args)
        return None if s2 is None else (s2, ())
    if kind == "Phase1a":
        out = phase1a(s, qs.n)
        return None if out is None else (s, out)
    if kind == "Phase1b":
        out = phase1b(s, *args)
        return None if out is None else (out[0], out[1:])
    if kind == "BecomeLeader":
        s2 = become_leader(s, *args, qs)
        return None if s2 is None else (s2, ())
    if kind == "Propose":
        out = propose(s, *args)
        return None if out is None else (out[0], out[1:])
    if kind == "Accept":
        out = accept(s, *args)
        return None if out is None else (out[0], out[1:])
    if kind == "Learn":
        s2 = learn(s, *args, qs, flags)
        return None if s2 is None else (s2, ())
    raise ValueError(f"unknown MultiPaxos action {kind!r}")
