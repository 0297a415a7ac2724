"""Raft* replica as a pure state machine.

Raft* differs from Raft in three ways that make it map onto MultiPaxos:
vote replies carry the voter's log so a new leader can adopt safe values
past its own last index, every entry carries a Paxos-visible ballot that
appends rewrite to the appending term, and followers refuse appends that
would shorten their log.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

from .core import (
    Action,
    NO_BALLOT,
    NO_INDEX,
    NOVAL,
    Entry,
    QuorumSystem,
    Value,
    ballot_succ,
    highest_entry,
    proposer_of,
    slot,
)

NO_FLAGS: frozenset[str] = frozenset()


@dataclass(frozen=True, slots=True)
class RaftState:
    me: int
    term: int = NO_BALLOT
    leader: bool = False
    log: tuple[Entry, ...] = ()  # always exactly indices 0..last_index
    last_index: int = NO_INDEX
    log_tail: int = NO_INDEX
    commit: int = NO_INDEX
    votes: tuple[frozenset, ...] = ()

    def entry(self, i: int) -> Entry:
        return slot(self.log, i)

    @property
    def last_term(self) -> int:
        return self.log[self.last_index].term if self.last_index >= 0 else NO_BALLOT

    def votes_at(self, i: int) -> frozenset:
        return slot(self.votes, i, frozenset())


# ---------------------------------------------------------------- messages


@dataclass(frozen=True, slots=True)
class RequestVote:
    cand: int
    term: int
    last_index: int
    last_term: int


@dataclass(frozen=True, slots=True)
class RequestVoteOK:
    acc: int
    term: int
    log: tuple[Entry, ...]
    log_tail: int

    @property
    def bal_or_term(self) -> int:
        return self.term


@dataclass(frozen=True, slots=True)
class Append:
    leader: int
    term: int
    prev: int
    prev_term: int
    entries: tuple[Entry, ...]
    commit: int

    @property
    def last(self) -> int:
        return self.prev + len(self.entries)


@dataclass(frozen=True, slots=True)
class AppendOK:
    acc: int
    term: int
    last_index: int


def init_state(me: int) -> RaftState:
    return RaftState(me)


def _add_votes(votes: tuple[frozenset, ...], log: tuple[Entry, ...], lo: int, hi: int, bal: int):
    out = list(votes) + [frozenset()] * max(0, hi + 1 - len(votes))
    for i in range(lo, hi + 1):
        out[i] = out[i] | {(bal, log[i].val)}
    return tuple(out)


# ----------------------------------------------------------------- phase 1


def request_vote(
    s: RaftState, n: int, term: int | None = None
) -> tuple[RaftState, RequestVote, RequestVoteOK] | None:
    """Start an election; the self-vote is implicit.

    ``term`` defaults to the next own term and must be owned and fresh.
    """
    if s.leader:
        return None
    t = ballot_succ(s.term, s.me, n) if term is None else term
    if t <= s.term or proposer_of(t, n) != s.me:
        return None
    s2 = replace(s, term=t, leader=False)
    rv = RequestVote(s.me, t, s.last_index, s.last_term)
    return s2, rv, RequestVoteOK(s.me, t, s.log, s.log_tail)


def up_to_date(s: RaftState, m: RequestVote) -> bool:
    if s.last_index == NO_INDEX:
        return True
    mine = s.last_term
    return mine < m.last_term or (mine == m.last_term and s.last_index <= m.last_index)


def receive_vote(s: RaftState, m: RequestVote) -> tuple[RaftState, RequestVoteOK] | None:
    if m.term <= s.term or not up_to_date(s, m):
        return None
    s2 = replace(s, term=m.term, leader=False)
    return s2, RequestVoteOK(s.me, m.term, s.log, s.log_tail)


def votes_ok(s: RaftState, replies: list, qs: QuorumSystem) -> bool:
    if not replies or proposer_of(s.term, qs.n) != s.me:
        return False
    accs = {m.acc for m in replies}
    return s.me in accs and all(m.term == s.term for m in replies) and qs.contains_quorum(accs)


def become_leader(s: RaftState, replies: Iterable[RequestVoteOK], qs: QuorumSystem) -> RaftState | None:
    """Take leadership, adopting safe values past the own last index.

    Recovered entries are stamped with the new term. When anything is
    recovered the whole log is stamped with the new term as ballot, which is
    the leader's implicit accept of its own log at that ballot.
    """
    replies = list(replies)
    if s.leader or not votes_ok(s, replies, qs):
        return None
    top = max(m.log_tail for m in replies)
    if top <= s.last_index:
        return replace(s, leader=True)
    t = s.term
    log = [Entry(t, e.term, e.val) for e in s.log]
    for i in range(s.last_index + 1, top + 1):
        e = highest_entry((slot(m.log, i) for m in replies), qs.n)
        if e.val is NOVAL:
            break
        log.append(Entry(t, t, e.val))
    log = tuple(log)
    last = len(log) - 1
    return replace(
        s,
        leader=True,
        log=log,
        last_index=last,
        log_tail=max(s.log_tail, last),
        votes=_add_votes(s.votes, log, 0, last, t),
    )


# ----------------------------------------------------------------- phase 2


def append_entries(
    s: RaftState, vals: Iterable[Value], prev: int
) -> tuple[RaftState, Append, AppendOK] | None:
    """Append ``vals`` at the leader and build the append for followers.

    Every entry of the leader's log is restamped with the current term as its
    ballot. An append without new values is only allowed once the leader's
    last entry belongs to its term, so the stamp always matches the last term.
    """
    vals = tuple(vals)
    if not s.leader or not NO_INDEX <= prev <= s.last_index:
        return None
    if any(v is NOVAL for v in vals):
        return None
    t = s.term
    if not vals and s.last_term != t:
        return None
    log = tuple(Entry(t, e.term, e.val) for e in s.log) + tuple(Entry(t, t, v) for v in vals)
    last = len(log) - 1
    s2 = replace(
        s,
        log=log,
        last_index=last,
        log_tail=max(s.log_tail, last),
        votes=_add_votes(s.votes, log, 0, last, t),
    )
    prev_term = log[prev].term if prev >= 0 else NO_BALLOT
    msg = Append(s.me, t, prev, prev_term, log[prev + 1:], s.commit)
    return s2, msg, AppendOK(s.me, t, last)


def append_acceptable(s: RaftState, m: Append, flags: frozenset[str] = NO_FLAGS) -> bool:
    if m.term < s.term:
        return False
    if m.prev >= 0 and m.prev > s.last_index:
        return False
    if m.prev >= 0 and s.log[m.prev].term != m.prev_term and "skip_prev_term_check" not in flags:
        return False
    return m.last >= s.last_index or "accept_shorter_log" in flags


def receive_append(
    s: RaftState, m: Append, flags: frozenset[str] = NO_FLAGS
) -> tuple[RaftState, AppendOK] | None:
    if not append_acceptable(s, m, flags):
        return None
    t = m.term
    hi = m.last
    keep = s.log[: m.prev + 1]
    tail = s.log[hi + 1:]  # non-empty only when a shorter append is let through
    if "skip_ballot_rewrite" in flags:
        log = keep + m.entries + tail
        votes = _add_votes(s.votes, log, m.prev + 1, hi, t)
    else:
        log = tuple(Entry(t, e.term, e.val) for e in keep + m.entries) + tail
        votes = _add_votes(s.votes, log, 0, hi, t)
    last = max(s.last_index, hi)
    s2 = replace(
        s,
        term=t,
        leader=s.leader and t == s.term,
        log=log,
        last_index=last,
        log_tail=max(s.log_tail, hi),
        commit=max(s.commit, min(m.commit, hi)),
        votes=votes,
    )
    return s2, AppendOK(s.me, t, last)


def leader_learn(
    s: RaftState, acks: Iterable[AppendOK], qs: QuorumSystem, flags: frozenset[str] = NO_FLAGS
) -> RaftState | None:
    """Advance the commit index from ``f`` follower acks plus the implicit self-ack."""
    acks = [a for a in acks if a.acc != s.me]
    if not s.leader or any(a.term != s.term for a in acks):
        return None
    needed = qs.f - 1 if "learn_with_f" in flags else qs.f
    if len({a.acc for a in acks}) < max(needed, 0):
        return None
    reach = min((a.last_index for a in acks), default=s.last_index)
    new = min(reach, s.last_index)
    if new <= s.commit:
        return None
    return replace(s, commit=new)


# ------------------------------------------------------------- invariants


def check_log_matching(states: list[RaftState]) -> str | None:
    for x in states:
        for y in states:
            if y.me <= x.me:
                continue
            for i in range(min(x.last_index, y.last_index), -1, -1):
                if x.log[i].term == y.log[i].term:
                    for j in range(i + 1):
                        a, b = x.log[j], y.log[j]
                        if (a.term, a.val) != (b.term, b.val):
                            return f"servers {x.me},{y.me} agree on term at {i} but differ at {j}"
                    break
    return None


def check_log_ballot(states: list[RaftState]) -> str | None:
    for s in states:
        if s.last_index == NO_INDEX:
            if s.log_tail != NO_INDEX:
                return f"server {s.me} has an empty log but log tail {s.log_tail}"
            continue
        lt = s.last_term
        for i, e in enumerate(s.log):
            if i <= s.last_index and e.bal != lt:
                return f"server {s.me} entry {i} ballot {e.bal} differs from last term {lt}"
            if i > s.last_index and e.bal > lt:
                return f"server {s.me} entry {i} ballot {e.bal} exceeds last term {lt}"
    return None


def check_election_safety(states: list[RaftState]) -> str | None:
    seen: dict[int, int] = {}
    for s in states:
        if s.leader:
            other = seen.setdefault(s.term, s.me)
            if other != s.me:
                return f"servers {other} and {s.me} both lead term {s.term}"
    return None


def check_commit_agreement(states: list[RaftState]) -> str | None:
    for x in states:
        for y in states:
            if y.me <= x.me:
                continue
            for i in range(min(x.commit, y.commit) + 1):
                if x.log[i].val != y.log[i].val:
                    return f"servers {x.me},{y.me} committed different values at {i}"
    return None


def check_commit_bounds(states: list[RaftState]) -> str | None:
    for s in states:
        if s.commit > s.last_index:
            return f"server {s.me} commit {s.commit} beyond last index {s.last_index}"
        if len(s.log) != s.last_index + 1:
            return f"server {s.me} log length disagrees with last index"
    return None


def merged_log(s: RaftState, replies: list[RequestVoteOK], qs: QuorumSystem) -> tuple[Value, ...]:
    """Values the candidate would hold after becoming leader with ``replies``."""
    top = max([m.log_tail for m in replies] + [s.last_index])
    vals = [e.val for e in s.log]
    for i in range(s.last_index + 1, top + 1):
        e = highest_entry((slot(m.log, i) for m in replies), qs.n)
        if e.val is NOVAL:
            break
        vals.append(e.val)
    return tuple(vals)


def check_leader_completeness(
    states: list[RaftState],
    candidates: Iterable[tuple[int, list[RequestVoteOK]]],
    qs: QuorumSystem,
) -> str | None:
    """Every value chosen at a ballot up to a would-be leader's term survives.

    ``candidates`` lists (server, replies) pairs for which BecomeLeader is
    enabled. Chosen is computed from the ghost vote history.
    """
    by_id = {s.me: s for s in states}
    width = max((len(s.votes) for s in states), default=0)
    chosen: list[tuple[int, int, Value]] = []
    for i in range(width):
        pairs: dict[tuple, set[int]] = {}
        for s in states:
            for bv in s.votes_at(i):
                pairs.setdefault(bv, set()).add(s.me)
        chosen += [(i, b, v) for (b, v), who in pairs.items() if qs.contains_quorum(who)]
    if not chosen:
        return None
    for a, replies in candidates:
        s = by_id[a]
        vals = merged_log(s, replies, qs)
        for i, b, v in chosen:
            if b <= s.term and slot(vals, i, NOVAL) != v:
                return f"server {a} could lead term {s.term} without {v!r} chosen at {i} (ballot {b})"
    return None


# -------------------------------------------------------------- dispatch

ACTIONS = ("RequestVote", "ReceiveVote", "BecomeLeader", "AppendEntries", "ReceiveAppend", "LeaderLearn")


def perform(
    s: RaftState, act: Action, qs: QuorumSystem, flags: frozenset[str] = NO_FLAGS
) -> tuple[RaftState, tuple] | None:
    """Run ``act`` on its replica; returns the new state and emitted messages."""
    kind, args = act.kind, act.args
    if kind == "RequestVote":
        out = request_vote(s, qs.n, *args)
    elif kind == "ReceiveVote":
        out = receive_vote(s, *args)
    elif kind == "BecomeLeader":
        s2 = become_leader(s, *args, qs)
        return None if s2 is None else (s2, ())
    elif kind == "AppendEntries":
        out = append_entries(s, *args)
    elif kind == "ReceiveAppend":
        out = receive_append(s, *args, flags)
    elif kind == "LeaderLearn":
        s2 = leader_learn(s, *args, qs, flags)
        return None if s2 is None else (s2, ())
    else:
        raise ValueError(f"unknown Raft* action {kind!r}")
    return None if out is None else (out[0], out[1:])
