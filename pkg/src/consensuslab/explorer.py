"""Bounded breadth-first enumeration of protocol universes.

A universe (``World``) holds every replica state plus the set of all messages
ever sent; messages are never consumed, so re-delivery is always possible.
Every reachable world is checked against the model's invariants, and every
edge can optionally be handed to refinement checkers.
"""

from __future__ import annotations

import itertools
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Iterator

from . import lease_protocols as lp
from . import mencius_protocols as mc
from . import multipaxos as mp
from . import raftstar as rs
from .core import NOOP, NOVAL, Action, Command, QuorumSystem, ballot_succ, proposer_of

NO_FLAGS: frozenset[str] = frozenset()


@dataclass(frozen=True)
class World:
    servers: tuple
    msgs: frozenset = frozenset()
    env: Any = None  # globals outside any replica, e.g. the lease timer

    def with_server(self, a: int, s: Any, emitted: Iterable = ()) -> "World":
        servers = self.servers[:a] + (s,) + self.servers[a + 1:]
        emitted = frozenset(emitted)
        msgs = self.msgs | emitted if not emitted <= self.msgs else self.msgs
        return World(servers, msgs, self.env)

    def of_type(self, cls: type) -> list:
        return [m for m in self.msgs if type(m) is cls]


@dataclass(frozen=True)
class ExploreConfig:
    protocol: str
    n: int = 3
    values: int = 2
    max_round: int = 2  # largest ballot number any server may adopt
    max_index: int = 1
    max_timer: int = 3
    lease_duration: int = 2
    budget: int = 5_000_000
    flags: frozenset[str] = NO_FLAGS
    learn_steps: bool = False  # enumerate the MultiPaxos Learn step (not in the TLA+ Next)
    any_ballot: bool = False  # jump to any owned ballot, not just the next round's
    max_grants: int = 3  # lease grant steps per run in the lease models
    lease_holders: tuple[int, ...] | None = None  # servers that may receive leases; None for all
    apply_steps: bool = False  # no invariant reads the apply index, so it is off by default

    def __post_init__(self) -> None:
        if not 1 <= self.n <= 5:
            raise ValueError("explorer supports 1 to 5 servers")
        if self.values < 1 or self.max_round < 0 or self.max_index < 0:
            raise ValueError("bounds must allow at least one value, round and index")
        if self.max_timer < 0 or self.lease_duration < 0:
            raise ValueError("timer bounds must be non-negative")
        if self.budget < 1:
            raise ValueError("state budget must be positive")

    @property
    def quorums(self) -> QuorumSystem:
        return QuorumSystem.majority(self.n)

    def value_set(self) -> tuple[Command, ...]:
        return tuple(Command("write", "x", f"v{k}") for k in range(self.values))


Invariant = Callable[[World], "str | None"]
EdgeCheck = Callable[[World, Action, World], "str | None"]


# ------------------------------------------------------------------ models


class Model:
    """Initial world, successor relation and properties of one protocol."""

    name = "abstract"

    def __init__(self, cfg: ExploreConfig) -> None:
        self.cfg = cfg
        self.qs = cfg.quorums
        self.n = cfg.n
        self.vals = cfg.value_set()
        self.flags = cfg.flags

    def initial(self) -> World:
        raise NotImplementedError

    def actions(self, w: World) -> Iterator[Action]:
        raise NotImplementedError

    def perform(self, w: World, act: Action) -> World | None:
        raise NotImplementedError

    def successors(self, w: World) -> Iterator[tuple[Action, World]]:
        for act in self.actions(w):
            w2 = self.perform(w, act)
            if w2 is not None and w2 != w:
                yield act, w2

    def invariants(self) -> dict[str, Invariant]:
        return {}

    def edge_checks(self) -> dict[str, EdgeCheck]:
        return {}

    # shared helpers

    def owned_ballots(self, cur: int, a: int) -> range:
        """Owned ballots of ``a`` above ``cur`` within the round bound.

        By default only the next round's ballot is offered.
        """
        if not self.cfg.any_ballot:
            b = ballot_succ(cur, a, self.n)
            return range(b, b + 1) if b <= self.cfg.max_round else range(0)
        first = ballot_succ(cur - cur % self.n - 1 if cur >= 0 else -1, a, self.n)
        if first <= cur:
            first += self.n
        return range(first, self.cfg.max_round + 1, self.n)

    def reply_sets(self, replies: list, me: int) -> Iterator[frozenset]:
        """Subsets of ``replies`` that include ``me`` and contain a quorum."""
        own = [m for m in replies if m.acc == me and proposer_of(m.bal_or_term, self.n) == me]
        others = [m for m in replies if m.acc != me]
        for mine in own:
            for k in range(len(others) + 1):
                for combo in itertools.combinations(others, k):
                    accs = {mine.acc, *(m.acc for m in combo)}
                    if len(accs) == k + 1 and self.qs.contains_quorum(accs):
                        yield frozenset((mine, *combo))


def base_of(x: Any) -> Any:
    """The base-protocol view of a layered state or message."""
    return getattr(x, "base", x)


class PaxosModel(Model):
    name = "multipaxos"
    replica: Any = mp

    def initial(self) -> World:
        return World(tuple(mp.init_state(a) for a in range(self.n)))

    def msgs(self, w: World, cls: type) -> list:
        return [m for m in w.msgs if type(base_of(m)) is cls]

    def timed(self, w: World) -> tuple:
        """Trailing arguments for actions that read the clock."""
        return ()

    def actions(self, w: World) -> Iterator[Action]:
        prepares = self.msgs(w, mp.Prepare)
        promises = self.msgs(w, mp.PrepareOK)
        accepts = self.msgs(w, mp.Accept)
        acks = self.msgs(w, mp.AcceptOK)
        now = self.timed(w)
        for a in range(self.n):
            full = w.servers[a]
            s = base_of(full)
            for b in self.owned_ballots(s.ballot, a):
                yield Action("IncreaseBallot", a, (b,))
            yield Action("Phase1a", a)
            for m in prepares:
                if m.bal > s.ballot:
                    yield Action("Phase1b", a, (m,))
            if not s.leader:
                mine = [m for m in promises if base_of(m).bal == s.ballot]
                for S in self.reply_sets(mine, a):
                    yield Action("BecomeLeader", a, (S,))
            if s.leader:
                for i in range(self.cfg.max_index + 1):
                    for v in self.propose_values(full, i):
                        yield Action("Propose", a, (i, v, *now))
            for m in accepts:
                if base_of(m).bal >= s.ballot:
                    yield Action("Accept", a, (m, *now))
            if self.cfg.learn_steps:
                yield from self.learn_actions(s, a, acks, now)

    def propose_values(self, s: Any, i: int) -> Iterable:
        return self.vals

    def learn_actions(self, s: Any, a: int, acks: list, now: tuple = ()) -> Iterator[Action]:
        groups: dict[tuple, dict[int, list]] = {}
        for m in acks:
            k = base_of(m)
            groups.setdefault((k.index, k.bal, k.val), {}).setdefault(k.acc, []).append(m)
        need = self.qs.f if "learn_with_f" in self.flags else None
        for (i, _b, v), per_acc in sorted(groups.items(), key=lambda kv: repr(kv[0])):
            if s.chosen_at(i) == v:
                continue
            accs = sorted(per_acc)
            for k in range(1, len(accs) + 1):
                for combo in itertools.combinations(accs, k):
                    if not (self.qs.contains_quorum(combo) or (need is not None and k == need)):
                        continue
                    for pick in itertools.product(*(per_acc[x] for x in combo)):
                        yield Action("Learn", a, (frozenset(pick), *now))

    def perform(self, w: World, act: Action) -> World | None:
        out = self.replica.perform(w.servers[act.server], act, self.qs, self.flags)
        if out is None:
            return None
        return w.with_server(act.server, *out)

    def bases(self, w: World) -> list:
        return [base_of(s) for s in w.servers]

    def invariants(self) -> dict[str, Invariant]:
        qs = self.qs
        return {
            "agreement": lambda w: mp.check_agreement(self.bases(w), qs),
            "one_value_per_ballot": lambda w: mp.check_one_value_per_ballot(self.bases(w)),
            "logs_consistent": lambda w: mp.check_logs_consistent(self.bases(w)),
        }

    def edge_checks(self) -> dict[str, EdgeCheck]:
        return {"chosen_stability": paxos_chosen_stable(self.qs), "vote_monotonicity": votes_monotone}


def paxos_chosen_stable(qs: QuorumSystem) -> EdgeCheck:
    """Chosen values, learned or derived from votes, never change or vanish."""

    def check(pre: World, act: Action, post: World) -> str | None:
        before = [base_of(s) for s in pre.servers]
        after = [base_of(s) for s in post.servers]
        for s, t in zip(before, after):
            for i, v in enumerate(s.chosen):
                if v is not None and t.chosen_at(i) != v:
                    return f"server {s.me} changed its chosen value at {i}"
        for i in range(mp.max_index(before) + 1):
            if not mp.chosen_values(before, qs, i) <= mp.chosen_values(after, qs, i):
                return f"a chosen value at index {i} stopped being chosen"
        return None

    return check


def votes_monotone(pre: World, act: Action, post: World) -> str | None:
    for s, t in zip(pre.servers, post.servers):
        s, t = base_of(s), base_of(t)
        for i, vs in enumerate(s.votes):
            if not vs <= t.votes_at(i):
                return f"server {s.me} lost votes at {i}"
    return None


class RaftModel(Model):
    name = "raftstar"
    replica: Any = rs

    def initial(self) -> World:
        return World(tuple(rs.init_state(a) for a in range(self.n)))

    msgs = PaxosModel.msgs
    timed = PaxosModel.timed
    bases = PaxosModel.bases

    def actions(self, w: World) -> Iterator[Action]:
        requests = self.msgs(w, rs.RequestVote)
        grants = self.msgs(w, rs.RequestVoteOK)
        appends = self.msgs(w, rs.Append)
        oks = self.msgs(w, rs.AppendOK)
        now = self.timed(w)
        for a in range(self.n):
            full = w.servers[a]
            s = base_of(full)
            if not s.leader:
                for t in self.owned_ballots(s.term, a):
                    yield Action("RequestVote", a, (t,))
            for m in requests:
                if m.term > s.term:
                    yield Action("ReceiveVote", a, (m,))
            if not s.leader:
                mine = [m for m in grants if base_of(m).term == s.term]
                for S in self.reply_sets(mine, a):
                    yield Action("BecomeLeader", a, (S,))
            if s.leader:
                yield from self.append_actions(full, a, now)
                yield from self.learn_actions(s, a, oks, now)
            for m in appends:
                if base_of(m).term >= s.term:
                    yield Action("ReceiveAppend", a, (m, *now))

    def append_values(self, s: Any) -> Iterable:
        return self.vals

    def append_actions(self, full: Any, a: int, now: tuple = ()) -> Iterator[Action]:
        # One new value per append, from any prefix point; value-free
        # heartbeats are exercised by the simulator only.
        s = base_of(full)
        if s.last_index >= self.cfg.max_index:
            return
        for prev in range(-1, s.last_index + 1):
            for v in self.append_values(full):
                yield Action("AppendEntries", a, ((v,), prev, *now))

    def learn_actions(self, s: Any, a: int, oks: list, now: tuple = ()) -> Iterator[Action]:
        needed = self.qs.f - 1 if "learn_with_f" in self.flags else self.qs.f
        by_acc: dict[int, list] = {}
        for m in oks:
            k = base_of(m)
            if k.term == s.term and k.acc != a:
                by_acc.setdefault(k.acc, []).append(m)
        if needed <= 0:
            yield Action("LeaderLearn", a, (frozenset(), *now))
        top = len(by_acc) if now else needed  # lease gates may need acks beyond f
        for k in range(max(needed, 1), top + 1):
            for accs in itertools.combinations(sorted(by_acc), k):
                for pick in itertools.product(*(by_acc[x] for x in accs)):
                    yield Action("LeaderLearn", a, (frozenset(pick), *now))

    perform = PaxosModel.perform

    def candidates(self, w: World) -> list[tuple[int, list]]:
        """(server, replies) pairs for which BecomeLeader is enabled."""
        grants = self.msgs(w, rs.RequestVoteOK)
        out = []
        for s in self.bases(w):
            if s.leader:
                continue
            mine = [base_of(m) for m in grants if base_of(m).term == s.term]
            out += [(s.me, list(S)) for S in self.reply_sets(mine, s.me)]
        return out

    def invariants(self) -> dict[str, Invariant]:
        qs = self.qs
        return {
            "log_matching": lambda w: rs.check_log_matching(self.bases(w)),
            "leader_completeness": lambda w: rs.check_leader_completeness(
                self.bases(w), self.candidates(w), qs
            ),
            "log_ballot": lambda w: rs.check_log_ballot(self.bases(w)),
            "election_safety": lambda w: rs.check_election_safety(self.bases(w)),
            "commit_agreement": lambda w: rs.check_commit_agreement(self.bases(w)),
            "commit_bounds": lambda w: rs.check_commit_bounds(self.bases(w)),
        }

    def edge_checks(self) -> dict[str, EdgeCheck]:
        return {"commit_monotone": raft_commit_monotone, "vote_monotonicity": votes_monotone}


def raft_commit_monotone(pre: World, act: Action, post: World) -> str | None:
    for s, t in zip(pre.servers, post.servers):
        s, t = base_of(s), base_of(t)
        if t.commit < s.commit:
            return f"server {s.me} commit index went back from {s.commit} to {t.commit}"
    return None


# ------------------------------------------------------------ lease models


class LeaseMixin:
    """Global timer, shared-memory grants and gated apply on a base model.

    Grants write the grantor's table directly and apply is gated on the
    state-level CanCommitAt, so no lease messages are exchanged here.
    """

    def initial_env(self) -> tuple[int, int]:
        return (0, 0)  # (timer, grants issued)

    def timed(self, w: World) -> tuple:
        return (w.env[0],)

    def actions(self, w: World) -> Iterator[Action]:
        yield from super().actions(w)
        timer, issued = w.env
        dur = self.cfg.lease_duration
        if timer < self.cfg.max_timer:
            yield Action("UpdateTimer", -1)
        states = list(w.servers)
        for a, s in enumerate(states):
            if issued < self.cfg.max_grants:
                for p in self.cfg.lease_holders or range(self.n):
                    if s.granted[p] < timer + dur:
                        yield Action("GrantLease", a, (p, timer, dur))
            i = s.apply_index + 1
            e = s.base.entry(i)
            if self.cfg.apply_steps and e.val is not NOVAL and lp.can_commit_at(states, self.qs, timer, i, e.bal, e.val):
                yield Action("Apply", a, (i, True))

    def perform(self, w: World, act: Action) -> World | None:
        timer, issued = w.env
        if act.kind == "UpdateTimer":
            # An expired lease is indistinguishable from one never granted.
            servers = tuple(
                replace(s, granted=tuple(d if d >= timer + 1 else lp.NEVER for d in s.granted))
                for s in w.servers
            )
            return World(servers, w.msgs, (timer + 1, issued))
        out = self.replica.perform(w.servers[act.server], act, self.qs, self.flags)
        if out is None:
            return None
        s, emitted = out
        w2 = w.with_server(act.server, s, (m for m in emitted if not isinstance(m, lp.LeaseGrant)))
        if act.kind == "GrantLease":
            w2 = World(w2.servers, w2.msgs, (timer, issued + 1))
        return w2

    def width(self, w: World) -> int:
        return max(len(s.votes) for s in self.bases(w))

    def invariants(self) -> dict[str, Invariant]:
        qs = self.qs
        return {
            **super().invariants(),
            "lease_inv": lambda w: lp.check_lease_inv(list(w.servers), qs, w.env[0], self.width(w)),
        }


class PQLModel(LeaseMixin, PaxosModel):
    name = "pql"
    replica = lp

    def initial(self) -> World:
        return World(tuple(lp.init_pql(a, self.n) for a in range(self.n)), env=self.initial_env())


class RaftPQLModel(LeaseMixin, RaftModel):
    name = "raftstar-pql"
    replica = lp

    def initial(self) -> World:
        return World(tuple(lp.init_raft_pql(a, self.n) for a in range(self.n)), env=self.initial_env())


# ------------------------------------------------------ coordinated models


class CoordMixin:
    """One instance group whose default leader is server 0."""

    def candidate_values(self, s: Any) -> tuple:
        return (*self.vals, NOOP)

    def invariants(self) -> dict[str, Invariant]:
        qs = self.qs
        return {
            **super().invariants(),
            "skip_safety": lambda w: mc.check_skip_safety(list(w.servers), qs),
            "skip_tags_on_noops": lambda w: mc.check_tags_on_noops(list(w.servers)),
        }


class CoordPaxosModel(CoordMixin, PaxosModel):
    name = "coorpaxos"
    replica = mc

    def initial(self) -> World:
        return World(tuple(mc.init_coord(a, self.n) for a in range(self.n)))

    def propose_values(self, s: Any, i: int) -> Iterable:
        return self.candidate_values(s)


class CoordRaftModel(CoordMixin, RaftModel):
    name = "raftstar-mencius"
    replica = mc

    def initial(self) -> World:
        return World(tuple(mc.init_coord(a, self.n, raft=True) for a in range(self.n)))

    def append_values(self, s: Any) -> Iterable:
        return self.candidate_values(s)


MODELS: dict[str, type[Model]] = {
    "multipaxos": PaxosModel,
    "raftstar": RaftModel,
    "pql": PQLModel,
    "raftstar-pql": RaftPQLModel,
    "coorpaxos": CoordPaxosModel,
    "raftstar-mencius": CoordRaftModel,
}


def build_model(cfg: ExploreConfig) -> Model:
    try:
        return MODELS[cfg.protocol](cfg)
    except KeyError:
        raise ValueError(f"unknown protocol {cfg.protocol!r}; choose from {sorted(MODELS)}") from None


# --------------------------------------------------------------- traversal


@dataclass
class Failure:
    check: str
    detail: str
    witness: list[Action]


@dataclass
class ExploreReport:
    protocol: str
    states: int = 0
    edges: int = 0
    complete: bool = True
    seconds: float = 0.0
    failures: list[Failure] = field(default_factory=list)
    checked: list[str] = field(default_factory=list)
    edge_verdicts: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "states": self.states,
            "edges": self.edges,
            "complete": self.complete,
            "seconds": round(self.seconds, 2),
            "checked": self.checked,
            "edge_verdicts": self.edge_verdicts,
            "failures": [
                {"check": f.check, "detail": f.detail, "witness_length": len(f.witness)}
                for f in self.failures
            ],
        }


def _path(parents: list[tuple[int, Action | None]], i: int) -> list[Action]:
    out = []
    while i:
        i, act = parents[i]
        out.append(act)
    return out[::-1]


def enumerate_states(
    model: Model,
    edge_hooks: dict[str, EdgeCheck] | None = None,
    check_states: bool = True,
    stop_at_first: bool = False,
) -> ExploreReport:
    """Breadth-first closure from the initial world, checking as it goes.

    Edge hooks return ``None`` for a passing edge, the string ``"stutter"``
    for a recognised stuttering edge, or a violation description.
    """
    t0 = time.monotonic()
    invs = model.invariants() if check_states else {}
    edges = {**model.edge_checks(), **(edge_hooks or {})}
    report = ExploreReport(model.name, checked=sorted(invs) + sorted(edges))
    report.edge_verdicts = {k: {"ok": 0, "stutter": 0, "violation": 0} for k in edge_hooks or {}}
    failed: set[str] = set()
    init = model.initial()
    seen: dict[World, int] = {init: 0}
    parents: list[tuple[int, Action | None]] = [(0, None)]
    frontier = deque([init])
    budget = model.cfg.budget

    def fail(name: str, detail: str, idx: int, extra: Action | None = None) -> None:
        failed.add(name)
        path = _path(parents, idx) + ([extra] if extra else [])
        report.failures.append(Failure(name, detail, path))

    def check(w: World, idx: int) -> None:
        for name, inv in invs.items():
            if name not in failed:
                msg = inv(w)
                if msg:
                    fail(name, msg, idx)

    check(init, 0)
    while frontier:
        if stop_at_first and report.failures:
            break
        w = frontier.popleft()
        idx = seen[w]
        for act, w2 in model.successors(w):
            report.edges += 1
            for name, hook in edges.items():
                verdict = hook(w, act, w2)
                tally = report.edge_verdicts.get(name)
                if verdict is None or verdict == "stutter":
                    if tally is not None:
                        tally["ok" if verdict is None else "stutter"] += 1
                    continue
                if tally is not None:
                    tally["violation"] += 1
                if name not in failed:
                    fail(name, verdict, idx, act)
            if w2 in seen:
                continue
            if len(seen) >= budget:
                report.complete = False
                continue
            j = len(parents)
            seen[w2] = j
            parents.append((idx, act))
            check(w2, j)
            frontier.append(w2)
    report.states = len(seen)
    report.seconds = time.monotonic() - t0
    return report


def explore(cfg: ExploreConfig, maps: Iterable[str] = (), **kw) -> ExploreReport:
    from .refinement import edge_checker

    model = build_model(cfg)
    hooks = {name: edge_checker(name, model) for name in maps}
    return enumerate_states(model, hooks, **kw)


def replay_witness(cfg: ExploreConfig, witness: list[Action]) -> list[World]:
    """Re-run a witness path from the initial world; every step must be enabled."""
    model = build_model(cfg)
    w = model.initial()
    out = [w]
    for act in witness:
        w2 = model.perform(w, act)
        if w2 is None:
            raise ValueError(f"witness step {act.kind} at server {act.server} is not enabled")
        w = w2
        out.append(w)
    return out


__all__ = [
    "ExploreConfig",
    "ExploreReport",
    "Failure",
    "MODELS",
    "Model",
    "World",
    "build_model",
    "enumerate_states",
    "explore",
    "replay_witness",
]
