"""Coordinated MultiPaxos and Raft* with Mencius-style skips.

Instances are partitioned among groups, and each group has a default leader
that owns round 0. When a default leader proposes a no-op at round 0 the
acceptors tag the vote as a skip. A skipped instance can never hold any
other value, so it becomes executable before it is chosen.

A non-default proposer may only re-propose a value it found during phase 1,
or a no-op where it found nothing. It forwards the skip tag of the reply
that supplied the value.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Iterable

from . import multipaxos as mp
from . import raftstar as rs
from .core import NO_INDEX, NOOP, NOVAL, Action, Entry, QuorumSystem, compare_entries, round_of, slot

NO_FLAGS: frozenset[str] = frozenset()


@dataclass(frozen=True, slots=True)
class CoordState:
    base: Any
    group: int = 0
    tags: tuple[bool, ...] = ()  # index -> skip tag of the last vote
    executable: frozenset[int] = frozenset()

    @property
    def me(self) -> int:
        return self.base.me

    def tag(self, i: int) -> bool:
        return slot(self.tags, i, False)


@dataclass(frozen=True, slots=True)
class TaggedPromise:
    """Phase-1 reply (PrepareOK or RequestVoteOK) plus the sender's skip tags."""

    base: Any
    tags: tuple[bool, ...]

    @property
    def acc(self) -> int:
        return self.base.acc

    @property
    def bal_or_term(self) -> int:
        return self.base.bal_or_term


@dataclass(frozen=True, slots=True)
class TaggedAccept:
    base: mp.Accept
    skip: bool


@dataclass(frozen=True, slots=True)
class TaggedAppend:
    base: rs.Append
    tags: tuple[bool, ...]  # one per carried entry


def default_leader(group: int, n: int) -> int:
    return group % n


def ballot_of(s: CoordState) -> int:
    return s.base.term if is_raft(s) else s.base.ballot


def is_raft(s: CoordState) -> bool:
    return isinstance(s.base, rs.RaftState)


def is_default(s: CoordState, n: int) -> bool:
    """The group's default leader, still at its round-0 ballot."""
    b = ballot_of(s)
    return s.me == default_leader(s.group, n) and b >= 0 and round_of(b, n) == 0


def init_coord(me: int, n: int, group: int = 0, raft: bool = False) -> CoordState:
    """Every replica starts promised to the group's round-0 default leader."""
    lead = default_leader(group, n)
    if raft:
        base = rs.RaftState(me, term=lead, leader=me == lead)
    else:
        base = mp.PaxosState(me, ballot=lead, leader=me == lead)
    return CoordState(base, group)


def _set_tags(tags: tuple[bool, ...], updates: dict[int, bool]) -> tuple[bool, ...]:
    if not updates:
        return tags
    out = list(tags) + [False] * max(0, max(updates) + 1 - len(tags))
    for i, t in updates.items():
        out[i] = t
    return tuple(out)


def _mark(s: CoordState, updates: dict[int, bool]) -> CoordState:
    skips = {i for i, t in updates.items() if t}
    return replace(s, tags=_set_tags(s.tags, updates), executable=s.executable | skips)


def merge_skip_tags(replies: list[TaggedPromise], lo: int, hi: int, n: int) -> dict[int, bool]:
    """Per index, the tag sent by the reply holding the highest entry."""
    out = {}
    for i in range(lo, hi + 1):
        best: Entry | None = None
        tag = False
        for m in replies:
            e = slot(m.base.log, i)
            if e.val is NOVAL:
                continue
            if best is None or compare_entries(e, best, n) > 0:
                best, tag = e, slot(m.tags, i, False)
        out[i] = tag
    return out


def proposal_tag(s: CoordState, i: int, v: Any, n: int, flags: frozenset[str]) -> bool | None:
    """Skip tag for proposing ``v`` at ``i``, or ``None`` when not allowed."""
    if is_default(s, n):
        return v == NOOP
    found = s.base.entry(i).val
    if found is not NOVAL:
        return s.tag(i) if found == v else None
    if v != NOOP:
        return None
    return "mark_nondefault_skip" in flags


# --------------------------------------------------------------- Paxos side


def _paxos_perform(s: CoordState, act: Action, qs: QuorumSystem, flags) -> tuple[CoordState, tuple] | None:
    kind, args = act.kind, act.args
    n = qs.n
    if kind in ("IncreaseBallot", "Learn"):
        out = mp.perform(s.base, act, qs, flags)
        return None if out is None else (replace(s, base=out[0]), out[1])
    if kind == "Phase1a":
        out = mp.phase1a(s.base, n)
        if out is None:
            return None
        prep, ok = out
        return s, (prep, TaggedPromise(ok, s.tags))
    if kind == "Phase1b":
        out = mp.phase1b(s.base, *args)
        if out is None:
            return None
        b, ok = out
        return replace(s, base=b), (TaggedPromise(ok, s.tags),)
    if kind == "BecomeLeader":
        (replies,) = args
        replies = list(replies)
        b = mp.become_leader(s.base, [m.base for m in replies], qs)
        if b is None:
            return None
        top = max(m.base.log_tail for m in replies)
        merged = merge_skip_tags(replies, 0, top, n)
        updates = {i: t for i, t in merged.items() if b.entry(i).val is not NOVAL}
        return replace(s, base=b, tags=_set_tags(s.tags, updates)), ()
    if kind == "Propose":
        i, v = args
        tag = proposal_tag(s, i, v, n, flags)
        if tag is None:
            return None
        out = mp.propose(s.base, i, v)
        if out is None:
            return None
        b, m, ack = out
        return _mark(replace(s, base=b), {i: tag}), (TaggedAccept(m, tag), ack)
    if kind == "Accept":
        (m,) = args
        out = mp.accept(s.base, m.base)
        if out is None:
            return None
        b, ack = out
        return _mark(replace(s, base=b), {m.base.index: m.skip}), (ack,)
    raise ValueError(f"unknown coordinated Paxos action {kind!r}")


# ---------------------------------------------------------------- Raft side


def _raft_perform(s: CoordState, act: Action, qs: QuorumSystem, flags) -> tuple[CoordState, tuple] | None:
    kind, args = act.kind, act.args
    n = qs.n
    if kind == "LeaderLearn":
        out = rs.perform(s.base, act, qs, flags)
        return None if out is None else (replace(s, base=out[0]), out[1])
    if kind == "RequestVote":
        out = rs.request_vote(s.base, n, *args)
        if out is None:
            return None
        b, rv, ok = out
        return replace(s, base=b), (rv, TaggedPromise(ok, s.tags))
    if kind == "ReceiveVote":
        out = rs.receive_vote(s.base, *args)
        if out is None:
            return None
        b, ok = out
        return replace(s, base=b), (TaggedPromise(ok, s.tags),)
    if kind == "BecomeLeader":
        (replies,) = args
        replies = list(replies)
        b = rs.become_leader(s.base, [m.base for m in replies], qs)
        if b is None:
            return None
        lo = s.base.last_index + 1
        merged = merge_skip_tags(replies, lo, b.last_index, n)
        return replace(s, base=b, tags=_set_tags(s.tags, merged)), ()
    if kind == "AppendEntries":
        vals, prev = args
        vals = tuple(vals)
        first = s.base.last_index + 1
        new_tags = {}
        for k, v in enumerate(vals):
            tag = proposal_tag(s, first + k, v, n, flags)
            if tag is None:
                return None
            new_tags[first + k] = tag
        out = rs.append_entries(s.base, vals, prev)
        if out is None:
            return None
        b, m, ack = out
        s2 = _mark(replace(s, base=b), new_tags)
        carried = tuple(s2.tag(i) for i in range(prev + 1, b.last_index + 1))
        return s2, (TaggedAppend(m, carried), ack)
    if kind == "ReceiveAppend":
        (m,) = args
        out = rs.receive_append(s.base, m.base, flags)
        if out is None:
            return None
        b, ack = out
        updates = {m.base.prev + 1 + k: t for k, t in enumerate(m.tags)}
        return _mark(replace(s, base=b), updates), (ack,)
    raise ValueError(f"unknown coordinated Raft* action {kind!r}")


def perform(
    s: CoordState, act: Action, qs: QuorumSystem, flags: frozenset[str] = NO_FLAGS
) -> tuple[CoordState, tuple] | None:
    return (_raft_perform if is_raft(s) else _paxos_perform)(s, act, qs, flags)


# ------------------------------------------------------------- projection

PAXOS_MODIFIED = frozenset({"Phase1a", "Phase1b", "BecomeLeader", "Propose", "Accept"})
RAFT_MODIFIED = frozenset({"RequestVote", "ReceiveVote", "BecomeLeader", "AppendEntries", "ReceiveAppend"})


def classify(protocol: str, kind: str) -> str:
    modified = RAFT_MODIFIED if protocol == "raftstar-mencius" else PAXOS_MODIFIED
    return "modified" if kind in modified else "unchanged"


def project_msg(m: Any) -> Any:
    return m.base if isinstance(m, (TaggedPromise, TaggedAccept, TaggedAppend)) else m


def project_action(act: Action) -> Action:
    def strip(x: Any) -> Any:
        if isinstance(x, (list, tuple, frozenset, set)) and x and isinstance(next(iter(x)), TaggedPromise):
            return type(x)(project_msg(m) for m in x) if not isinstance(x, list) else [project_msg(m) for m in x]
        return project_msg(x)

    return Action(act.kind, act.server, tuple(strip(a) for a in act.args))


# -------------------------------------------------------------- invariants


def _voted_values(states: list[CoordState], i: int) -> dict[tuple, set[int]]:
    pairs: dict[tuple, set[int]] = {}
    for s in states:
        for bv in s.base.votes_at(i):
            pairs.setdefault(bv, set()).add(s.me)
    return pairs


def check_skip_safety(states: list[CoordState], qs: QuorumSystem) -> str | None:
    """An executable (skipped) instance can only ever be chosen as a no-op."""
    marked = set().union(*(s.executable for s in states)) if states else set()
    for i in sorted(marked):
        for (b, v), who in _voted_values(states, i).items():
            if v != NOOP and qs.contains_quorum(who):
                return f"instance {i} was executed as a skip but {v!r} is chosen at ballot {b}"
        for s in states:
            if is_raft(s) and i <= s.base.commit and s.base.entry(i).val != NOOP:
                return f"instance {i} was executed as a skip but server {s.me} committed {s.base.entry(i).val!r}"
            if not is_raft(s) and s.base.chosen_at(i) not in (None, NOOP):
                return f"instance {i} was executed as a skip but server {s.me} learned a value"
    return None


def check_tags_on_noops(states: list[CoordState]) -> str | None:
    """A skip tag only ever sits on a no-op vote."""
    for s in states:
        for i in s.executable:
            if s.base.entry(i).val not in (NOOP, NOVAL) and s.tag(i):
                return f"server {s.me} tags a non-no-op at {i} as a skip"
    return None


def executable_prefix(s: CoordState, committed: Iterable[int]) -> int:
    """Highest index up to which every instance is committed or skipped."""
    done = set(committed) | s.executable
    i = NO_INDEX
    while i + 1 in done:
        i += 1
    return i
