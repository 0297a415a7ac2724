"""Quorum leases on top of MultiPaxos (PQL) and Raft* (Raft*-PQL).

A lease is granted by one server (the grantor) to another (the holder) and
expires at a deadline on the shared logical timer. A server that holds live
leases from a quorum of grantors may answer reads locally. To keep those
reads linearizable, a write only commits once every holder of a lease
granted by a member of the acknowledging quorum has acknowledged it too.

Every replica state here wraps an unmodified base replica state; the extra
fields (grants, held leases, apply index) are the only thing the lease
machinery adds, so dropping them yields a base-protocol state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Any, Iterable

from . import multipaxos as mp
from . import raftstar as rs
from .core import NO_INDEX, NOVAL, Action, QuorumSystem, Value, touches_key

NO_FLAGS: frozenset[str] = frozenset()
NEVER = -1  # deadline of a lease that was never granted

DEFAULT_DURATION = 2000
DEFAULT_RENEW = 500


@dataclass(frozen=True, slots=True)
class LeaseState:
    base: Any
    granted: tuple[int, ...]  # holder -> deadline of the lease this server granted
    held: tuple[tuple[int, int], ...]  # grantor -> (deadline, activation index)
    apply_index: int = NO_INDEX

    @property
    def me(self) -> int:
        return self.base.me


# ---------------------------------------------------------------- messages


@dataclass(frozen=True, slots=True)
class LeaseGrant:
    grantor: int
    holder: int
    deadline: int
    gate: int  # holder counts the lease once it has caught up to this index


@dataclass(frozen=True, slots=True)
class LeaseAck:
    """A base acknowledgment plus the leases its sender had granted."""

    base: Any
    holders: frozenset[tuple[int, int]]  # (holder, deadline)

    @property
    def acc(self) -> int:
        return self.base.acc


def init_pql(me: int, n: int) -> LeaseState:
    return LeaseState(mp.init_state(me), (NEVER,) * n, ((NEVER, NO_INDEX),) * n)


def init_raft_pql(me: int, n: int) -> LeaseState:
    return LeaseState(rs.init_state(me), (NEVER,) * n, ((NEVER, NO_INDEX),) * n)


def is_raft(s: LeaseState) -> bool:
    return isinstance(s.base, rs.RaftState)


def committed_index(s: LeaseState) -> int:
    """Highest index known committed, as a contiguous prefix."""
    if is_raft(s):
        return s.base.commit
    i = NO_INDEX
    while s.base.chosen_at(i + 1) is not None:
        i += 1
    return i


def log_end(s: LeaseState) -> int:
    return s.base.last_index if is_raft(s) else s.base.log_tail


def value_at(s: LeaseState, i: int) -> Value:
    if is_raft(s):
        return s.base.entry(i).val
    v = s.base.chosen_at(i)
    return v if v is not None else s.base.entry(i).val


# ------------------------------------------------------------------ leases


def grant_lease(s: LeaseState, holder: int, now: int, duration: int) -> tuple[LeaseState, LeaseGrant]:
    """Grant (or extend) a lease; only the grant table changes."""
    deadline = now + duration
    granted = s.granted[:holder] + (deadline,) + s.granted[holder + 1:]
    return replace(s, granted=granted), LeaseGrant(s.me, holder, deadline, log_end(s))


def receive_lease(s: LeaseState, m: LeaseGrant, now: int) -> LeaseState:
    old_deadline, old_gate = s.held[m.grantor]
    gate = m.gate
    if old_deadline >= now and lease_activated(s, old_gate):
        gate = old_gate  # an unbroken lease stays usable across renewals
    held = s.held[: m.grantor] + ((max(m.deadline, old_deadline), gate),) + s.held[m.grantor + 1:]
    return replace(s, held=held)


def lease_activated(s: LeaseState, gate: int) -> bool:
    return (s.base.commit if is_raft(s) else s.apply_index) >= gate


def granted_holders(s: LeaseState, now: int) -> frozenset[tuple[int, int]]:
    return frozenset((p, d) for p, d in enumerate(s.granted) if d >= now)


def valid_leases(s: LeaseState, now: int) -> list[int]:
    """Grantors whose lease to this server is live and activated."""
    return [g for g, (d, gate) in enumerate(s.held) if d >= now and lease_activated(s, gate)]


def holds_quorum_lease(s: LeaseState, qs: QuorumSystem, now: int) -> bool:
    return qs.contains_quorum(valid_leases(s, now))


def lease_is_active(grants: Iterable[tuple[int, ...]], p: int, qs: QuorumSystem, timer: int) -> bool:
    """Global view: a quorum of grantors all hold unexpired leases to ``p``."""
    grants = list(grants)
    return qs.contains_quorum(a for a, row in enumerate(grants) if row[p] >= timer)


# ---------------------------------------------------------------- applying


def apply(s: LeaseState, i: int, gate_checked: bool = False) -> LeaseState | None:
    """Advance the apply index by one.

    The commit gate is the local commit point unless the caller already
    evaluated the global CanCommitAt gate (``gate_checked``).
    """
    if i != s.apply_index + 1 or (not gate_checked and i > committed_index(s)):
        return None
    return replace(s, apply_index=i)


def read_ready(s: LeaseState, key: str, qs: QuorumSystem, now: int, flags: frozenset[str] = NO_FLAGS) -> bool:
    """Whether a read of ``key`` may be answered from local state."""
    if not holds_quorum_lease(s, qs, now):
        return False
    if "skip_commit_guard" in flags:
        return True
    if not is_raft(s):
        return s.base.log_tail == s.apply_index
    touching = [i for i, e in enumerate(s.base.log) if touches_key(e.val, key)]
    last = max(touching, default=NO_INDEX)
    return last <= s.base.commit and last <= s.apply_index


# ------------------------------------------------------------ learn gates


def _live_holders(acks: Iterable[LeaseAck], now: int) -> set[int]:
    return {p for a in acks for p, d in a.holders if d >= now}


def pql_learn(
    s: LeaseState, acks: Iterable[LeaseAck], qs: QuorumSystem, now: int, flags: frozenset[str] = NO_FLAGS
) -> LeaseState | None:
    """MultiPaxos learn that also waits for every live lease holder named in the acks."""
    acks = list(acks)
    if "skip_holder_wait" not in flags:
        accs = {a.acc for a in acks}
        if not _live_holders(acks, now) <= accs:
            return None
    b = mp.learn(s.base, [a.base for a in acks], qs, flags)
    return None if b is None else replace(s, base=b)


def raft_pql_learn(
    s: LeaseState, acks: Iterable[LeaseAck], qs: QuorumSystem, now: int, flags: frozenset[str] = NO_FLAGS
) -> LeaseState | None:
    """Raft* leader learn gated on acks from all live holders.

    Holders come from the acks and from the leader's own grants (its implicit
    self-ack). The commit point is the minimum over every ack passed in, so
    callers pass the top-f acks plus one ack per holder.
    """
    acks = [a for a in acks if a.acc != s.me]
    if "skip_holder_wait" not in flags:
        holders = _live_holders(acks, now) | {p for p, _ in granted_holders(s, now)}
        holders.discard(s.me)
        if not holders <= {a.acc for a in acks}:
            return None
    b = rs.leader_learn(s.base, [a.base for a in acks], qs, flags)
    return None if b is None else replace(s, base=b)


# -------------------------------------------------------------- dispatch

ADDED = frozenset({"GrantLease", "ReceiveLease", "Apply", "LocalRead", "UpdateTimer"})
PQL_MODIFIED = frozenset({"Accept", "Propose", "Learn"})
RAFT_PQL_MODIFIED = frozenset({"AppendEntries", "ReceiveAppend", "LeaderLearn"})


def classify(protocol: str, kind: str) -> str:
    if kind in ADDED:
        return "added"
    modified = PQL_MODIFIED if protocol == "pql" else RAFT_PQL_MODIFIED
    return "modified" if kind in modified else "unchanged"


def _reads_blocked(s: LeaseState, vals: Iterable[Value], qs: QuorumSystem, now: int) -> bool:
    """A server holding a quorum lease never puts a read into the log."""
    return any(getattr(v, "is_read", False) for v in vals) and holds_quorum_lease(s, qs, now)


def perform(
    s: LeaseState, act: Action, qs: QuorumSystem, flags: frozenset[str] = NO_FLAGS
) -> tuple[LeaseState, tuple] | None:
    """Run a lease-protocol action. Time-dependent actions take ``now`` last."""
    kind, args = act.kind, act.args
    raft = is_raft(s)
    if kind == "GrantLease":
        holder, now, duration = args
        s2, msg = grant_lease(s, holder, now, duration)
        if "grant_bumps_ballot" in flags:
            b = s2.base
            b = replace(b, term=b.term + 1) if raft else replace(b, ballot=b.ballot + 1)
            s2 = replace(s2, base=b)
        return s2, (msg,)
    if kind == "ReceiveLease":
        m, now = args
        return receive_lease(s, m, now), ()
    if kind == "Apply":
        s2 = apply(s, *args)
        return None if s2 is None else (s2, ())
    if kind == "LocalRead":
        key, now = args
        return (s, ()) if read_ready(s, key, qs, now, flags) else None
    if kind in ("Learn", "LeaderLearn"):
        acks, now = args
        learn = raft_pql_learn if raft else pql_learn
        s2 = learn(s, acks, qs, now, flags)
        return None if s2 is None else (s2, ())
    base_act, now = _strip_time(act)
    if now is not None:
        if kind == "Propose" and s.base.entry(base_act.args[0]).val is NOVAL:
            if _reads_blocked(s, (base_act.args[1],), qs, now):
                return None
        if kind == "AppendEntries" and _reads_blocked(s, base_act.args[0], qs, now):
            return None
    out = (rs if raft else mp).perform(s.base, base_act, qs, flags)
    if out is None:
        return None
    b, emitted = out
    s2 = replace(s, base=b)
    holders = granted_holders(s2, now) if now is not None else frozenset()
    wrapped = tuple(
        LeaseAck(m, holders) if isinstance(m, (mp.AcceptOK, rs.AppendOK)) else m for m in emitted
    )
    return s2, wrapped


TIMED = frozenset({"Accept", "Propose", "AppendEntries", "ReceiveAppend"})


def _strip_time(act: Action) -> tuple[Action, int | None]:
    """Lease-aware base actions carry the current time as a final argument."""
    if act.kind in TIMED:
        *rest, now = act.args
        return Action(act.kind, act.server, tuple(rest)), now
    return act, None


def project_action(act: Action) -> Action | None:
    """The base action a lease action stands for; ``None`` for added steps."""
    if act.kind in ADDED:
        return None
    if act.kind in ("Learn", "LeaderLearn"):
        acks, _now = act.args
        return Action(act.kind, act.server, (frozenset(a.base for a in acks),))
    return _strip_time(act)[0]


def project_msg(m: Any) -> Any:
    if isinstance(m, LeaseAck):
        return m.base
    if isinstance(m, LeaseGrant):
        return None
    return m


# -------------------------------------------------------------- invariants


def executable(
    states: list[LeaseState], qs: QuorumSystem, timer: int, indices: Iterable[int]
) -> list[tuple[int, int, Value]]:
    """(i, b, v) triples that can commit under the global lease view."""
    out = []
    grants = [s.granted for s in states]
    for i in indices:
        voters: dict[tuple, set[int]] = {}
        for s in states:
            for bv in s.base.votes_at(i):
                voters.setdefault(bv, set()).add(s.me)
        for (b, v), who in voters.items():
            for q in qs.quorums:
                if not q <= who:
                    continue
                holders = {p for a in q for p, d in enumerate(grants[a]) if d >= timer}
                if holders <= who:
                    out.append((i, b, v))
                    break
    return out


def can_commit_at(states: list[LeaseState], qs: QuorumSystem, timer: int, i: int, b: int, v: Value) -> bool:
    """Some quorum voted (b, v) at i, and so did every holder its members granted."""
    voters = {s.me for s in states if (b, v) in s.base.votes_at(i)}
    for q in qs.quorums:
        if q <= voters:
            holders = {p for a in q for p, d in enumerate(states[a].granted) if d >= timer}
            if holders <= voters:
                return True
    return False


def check_lease_inv(states: list[LeaseState], qs: QuorumSystem, timer: int, width: int) -> str | None:
    """Every executable value is chosen and known to every active lease holder."""
    grants = [s.granted for s in states]
    active = [p for p in range(len(states)) if lease_is_active(grants, p, qs, timer)]
    for i, b, v in executable(states, qs, timer, range(width)):
        voters = {s.me for s in states if (b, v) in s.base.votes_at(i)}
        if not qs.contains_quorum(voters):
            return f"executable value at {i} is not chosen"
        missing = [p for p in active if p not in voters]
        if missing:
            return f"active lease holders {missing} have not voted the executable value at {i}"
    return None


def check_runtime_lease_inv(states: list[LeaseState], qs: QuorumSystem, now: int) -> str | None:
    """Committed entries are chosen, and every server able to read locally has accepted or learned them."""
    holders = tuple(h.me for h in states if holds_quorum_lease(h, qs, now))
    tops = [committed_index(s) for s in states]
    for i in range(max(tops, default=NO_INDEX) + 1):
        committed = frozenset((value_at(s, i), s.me) for s, top in zip(states, tops) if top >= i)
        learned = tuple(states[h].base.chosen_at(i) if not is_raft(states[h]) else None for h in holders)
        bad = _index_lease_safe(tuple(t.base.votes_at(i) for t in states), committed, holders, learned, qs)
        if bad:
            return f"{bad} at {i}"
    return None


@lru_cache(maxsize=1 << 16)
def _index_lease_safe(
    votes: tuple, committed: frozenset, holders: tuple, learned: tuple, qs: QuorumSystem
) -> str | None:
    for v, who in sorted(committed, key=lambda p: p[1]):
        bals = {b for vs in votes for b, w in vs if w == v}
        if not any(qs.contains_quorum(a for a, vs in enumerate(votes) if (b, v) in vs) for b in bals):
            return f"server {who} committed {v!r} but it is not chosen"
        for h, known in zip(holders, learned):
            if known != v and not any(w == v for _b, w in votes[h]):
                return f"lease holder {h} can read locally but has neither accepted nor learned the committed value"
    return None
