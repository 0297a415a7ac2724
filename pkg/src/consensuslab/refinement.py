"""Step-by-step refinement checking between protocol pairs.

Two kinds of maps are supported.

* Raft* to MultiPaxos style maps translate every Raft* step into a sequence
  of abstract MultiPaxos steps. The sequence is replayed with the abstract
  protocol's own transition functions on the mapped pre-state, and the result
  must equal the mapped post-state. Data-plane messages (accepts and their
  acknowledgments) are derived from vote history on both sides, so only
  phase-1 messages are compared directly.
* Delta maps strip the state and messages a derived protocol adds to its
  base. Added steps must leave the base projection untouched. Unchanged and
  modified steps must be reproducible by the base action with the same inputs.

A verdict is ``ok``, ``stutter`` or ``violation``; violations carry a detail
string naming the first mismatching field.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Callable, Iterable

from . import lease_protocols as lp
from . import mencius_protocols as mc
from . import multipaxos as mp
from . import raftstar as rs
from .core import NO_BALLOT, Action, Entry, QuorumSystem, proposer_of

NO_FLAGS: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Step:
    """One replica step of a concrete run."""

    pre: tuple
    action: Action
    post: tuple
    emitted: tuple = ()


@dataclass(frozen=True)
class Verdict:
    kind: str  # "ok", "stutter" or "violation"
    detail: str = ""
    abstract: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.kind != "violation"


class History:
    """Messages sent so far, indexed the way abstract guards need them."""

    def __init__(self, msgs: Iterable = (), keep_all: bool = False) -> None:
        self.control: set = set()
        self.lease_acks: dict[int, list[lp.LeaseAck]] = defaultdict(list)
        # Explorer worlds only expose messages that are new to the message set,
        # so a re-sent message is invisible there; keep everything to allow for it.
        self.sent: set | None = set() if keep_all else None
        self.add(msgs)

    def add(self, msgs: Iterable) -> None:
        msgs = tuple(msgs)
        if self.sent is not None:
            self.sent.update(msgs)
        for m in msgs:
            if isinstance(m, lp.LeaseAck) and isinstance(m.base, rs.AppendOK):
                self.lease_acks[m.base.term].append(m)
            elif isinstance(m, (rs.RequestVote, rs.RequestVoteOK, mp.Prepare, mp.PrepareOK, mc.TaggedPromise)):
                self.control.add(m)


def _same_emissions(want: set, got: set, hist: History, project: Callable[[Any], Any]) -> bool:
    if want == got:
        return True
    if hist.sent is None or not got <= want:
        return False
    return want - got <= {project(m) for m in hist.sent}


# ------------------------------------------------------------- state maps


def map_raft_state(s: rs.RaftState, chosen_full_log: bool = False) -> mp.PaxosState:
    """Raft* replica viewed as a MultiPaxos replica."""
    log = tuple(Entry(e.bal, NO_BALLOT, e.val) for e in s.log)
    top = s.last_index if chosen_full_log else s.commit
    return mp.PaxosState(
        s.me,
        ballot=s.term,
        leader=s.leader,
        log=log,
        log_tail=s.log_tail,
        chosen=tuple(e.val for e in s.log[: top + 1]),
        votes=s.votes,
    )


def map_raft_msg(m: Any) -> Any:
    if isinstance(m, rs.RequestVote):
        return mp.Prepare(m.cand, m.term)
    if isinstance(m, rs.RequestVoteOK):
        return mp.PrepareOK(m.acc, m.term, tuple(Entry(e.bal, NO_BALLOT, e.val) for e in m.log), m.log_tail)
    if isinstance(m, mc.TaggedPromise):
        return mc.TaggedPromise(map_raft_msg(m.base), m.tags)
    return None  # data plane


def _diff(a: Any, b: Any, path: str = "") -> str | None:
    """Name the first field where ``a`` (expected) and ``b`` (actual) differ."""
    if a == b:
        return None
    if is_dataclass(a) and type(a) is type(b):
        for f in fields(a):
            d = _diff(getattr(a, f.name), getattr(b, f.name), f"{path}{f.name}.")
            if d:
                return d
    if isinstance(a, tuple) and isinstance(b, tuple) and path.endswith("log."):
        for i in range(max(len(a), len(b))):
            x = a[i] if i < len(a) else None
            y = b[i] if i < len(b) else None
            if x != y:
                if x is not None and y is not None and x.bal != y.bal:
                    return f"instance.bal at index {i}: abstract {x.bal}, concrete {y.bal}"
                return f"instance.val at index {i}: abstract {x!r}, concrete {y!r}"
    label = path.rstrip(".") or "state"
    return f"{label}: abstract {a!r}, concrete {b!r}"


# ----------------------------------------------------- Raft*-style mapping


class RaftToPaxos:
    """Raft* (optionally with a lease or skip layer) refining MultiPaxos."""

    def __init__(self, name: str, qs: QuorumSystem, layer: str = "", chosen_full_log: bool = False) -> None:
        self.name = name
        self.qs = qs
        self.layer = layer  # "", "lease" or "coord"
        self.chosen_full_log = chosen_full_log

    # state and message maps

    def map_state(self, s: Any) -> Any:
        if self.layer:
            return replace(s, base=map_raft_state(s.base, self.chosen_full_log))
        return map_raft_state(s, self.chosen_full_log)

    def raft(self, s: Any) -> rs.RaftState:
        return s.base if self.layer else s

    def abstract_perform(self, s: Any, act: Action) -> tuple[Any, tuple] | None:
        if self.layer == "lease":
            return lp.perform(s, act, self.qs)
        if self.layer == "coord":
            return mc.perform(s, act, self.qs)
        return mp.perform(s, act, self.qs)

    # translation

    def translate(self, step: Step, hist: History) -> tuple[list[Action], str | None]:
        """Abstract actions for one concrete step, or a guard failure."""
        act = step.action
        a, kind, args = act.server, act.kind, act.args
        pre, post = self.raft(step.pre[a]), self.raft(step.post[a])
        T = post.term
        now = args[-1] if self.layer == "lease" and kind in lp.TIMED | {"LeaderLearn"} else None
        timed = (now,) if self.layer == "lease" else ()
        out: list[Action] = []

        def settled(j: int, v: Any, tag: Any = None) -> bool:
            # an abstract step that would rewrite an identical vote changes nothing
            if j > pre.last_index or pre.log[j].bal != T or pre.log[j].val != v or (T, v) not in pre.votes_at(j):
                return False
            return tag is None or step.pre[a].tag(j) == tag

        def proposals(lo: int, hi: int, time_args: tuple = timed) -> None:
            out.extend(
                Action("Propose", a, (j, post.log[j].val, *time_args))
                for j in range(lo, hi + 1)
                if not settled(j, post.log[j].val)
            )

        if kind == "LocalRead":
            return [], None
        if kind == "RequestVote":
            return [Action("IncreaseBallot", a, (T,)), Action("Phase1a", a)], None
        if kind == "ReceiveVote":
            m = args[0]
            if m not in hist.control:
                return [], "vote request was never sent"
            return [Action("Phase1b", a, (mp.Prepare(m.cand, m.term),))], None
        if kind == "BecomeLeader":
            replies = list(args[0])
            if any(m not in hist.control for m in replies):
                return [], "vote reply was never sent"
            mapped = frozenset(map_raft_msg(m) for m in replies)
            out.append(Action("BecomeLeader", a, (mapped,)))
            if post.log != pre.log:
                proposals(0, post.last_index, (None,) if self.layer == "lease" else ())
            return out, None
        if kind == "AppendEntries":
            proposals(0, post.last_index)
            return out, None
        if kind == "ReceiveAppend":
            m = args[0].base if self.layer == "coord" else args[0]
            hi = m.last
            for j in range(hi + 1):
                v = pre.log[j].val if j <= m.prev else m.entries[j - m.prev - 1].val
                tag = None
                if self.layer == "coord":
                    tag = step.pre[a].tag(j) if j <= m.prev else args[0].tags[j - m.prev - 1]
                if j < hi and pre.term == T and settled(j, v, tag):
                    continue
                acc = mp.Accept(proposer_of(m.term, self.qs.n), j, m.term, v)
                if self.layer == "coord":
                    acc = mc.TaggedAccept(acc, tag)
                out.append(Action("Accept", a, (acc, *timed)))
            return out + self._learns(step, hist, pre.commit + 1, post.commit, now), None
        if kind == "LeaderLearn":
            return self._learns(step, hist, pre.commit + 1, post.commit, now, leader_acks=args[0]), None
        return [], f"no abstract counterpart for {kind}"

    def _learns(self, step: Step, hist: History, lo: int, hi: int, now, leader_acks=None) -> list[Action]:
        a = step.action.server
        post = self.raft(step.post[a])
        out = []
        for j in range(lo, hi + 1):
            v = post.log[j].val
            if self.layer == "lease":
                acks = self._lease_acks(step, hist, j, v, now, leader_acks)
                out.append(Action("Learn", a, (acks, now)))
            else:
                out.append(Action("Learn", a, (self._vote_acks(step, j, v),)))
        return out

    def _voted(self, step: Step, acc: int, j: int, b: int, v: Any) -> bool:
        a = step.action.server
        s = step.post[a] if acc == a else step.pre[acc]
        return (b, v) in self.raft(s).votes_at(j)

    def _vote_acks(self, step: Step, j: int, v: Any) -> frozenset:
        """Acknowledgments derivable from vote history at some quorum ballot."""
        a = step.action.server
        voters: dict[int, set[int]] = defaultdict(set)
        for x in range(len(step.pre)):
            s = self.raft(step.post[a] if x == a else step.pre[x])
            for b, w in s.votes_at(j):
                if w == v:
                    voters[b].add(x)
        for b in sorted(voters, reverse=True):
            if self.qs.contains_quorum(voters[b]):
                return frozenset(mp.AcceptOK(x, j, b, v) for x in voters[b])
        return frozenset()

    def _lease_acks(self, step: Step, hist: History, j: int, v: Any, now, leader_acks) -> frozenset:
        a = step.action.server
        if leader_acks is not None:
            T = self.raft(step.pre[a]).term
            pool = [x for x in leader_acks if x.base.last_index >= j]
            self_holders = lp.granted_holders(step.pre[a], now)
            acks = {lp.LeaseAck(mp.AcceptOK(a, j, T, v), self_holders)}
            acks |= {lp.LeaseAck(mp.AcceptOK(x.acc, j, T, v), x.holders) for x in pool if self._voted(step, x.acc, j, T, v)}
            return frozenset(acks)
        for T in sorted(hist.lease_acks, reverse=True):
            pool = {
                lp.LeaseAck(mp.AcceptOK(x.acc, j, T, v), x.holders)
                for x in hist.lease_acks[T]
                if x.base.last_index >= j and self._voted(step, x.acc, j, T, v)
            }
            closed = _holder_closed(pool, now)
            if self.qs.contains_quorum(x.acc for x in closed):
                return frozenset(closed)
        return frozenset()

    # verification

    def verify(self, step: Step, hist: History) -> Verdict:
        a = step.action.server
        if a < 0:
            return _environment_step(step, self.raft)
        for x, (p, q) in enumerate(zip(step.pre, step.post)):
            if x != a and p != q:
                return Verdict("violation", f"server {x} changed during a step of server {a}")
        if self.layer == "lease" and step.action.kind in ("GrantLease", "ReceiveLease", "Apply"):
            # identical lease bookkeeping on both sides; only the base must hold still
            d = _diff(step.pre[a].base, step.post[a].base)
            return Verdict("violation", d, (step.action.kind,)) if d else Verdict("ok", "", (step.action.kind,))
        acts, why = self.translate(step, hist)
        names = tuple(x.kind for x in acts)
        if why:
            return Verdict("violation", f"{step.action.kind}: {why}", names)
        cur = self.map_state(step.pre[a])
        target = self.map_state(step.post[a])
        emitted: list = []
        for x in acts:
            bad = self._guard(x, step, cur)
            if bad:
                return Verdict("violation", f"{x.kind} not enabled: {bad}", names)
            res = self.abstract_perform(cur, x)
            if res is None:
                return Verdict("violation", f"{x.kind} not enabled at server {a}", names)
            cur, msgs = res
            emitted.extend(msgs)
        d = _diff(cur, target)
        if d:
            return Verdict("violation", d, names)
        want = {m for m in emitted if _is_phase1(m)}
        got = {map_raft_msg(m) for m in step.emitted} - {None}
        if not _same_emissions(want, got, hist, map_raft_msg):
            return Verdict("violation", "phase-1 messages differ from the abstract step", names)
        if not acts:
            return Verdict("stutter", "", names)
        return Verdict("ok", "", names)

    def _guard(self, act: Action, step: Step, cur: Any) -> str | None:
        """Enabling conditions that depend on other replicas."""
        if act.kind != "Accept":
            return None
        m = act.args[0]
        m = m.base if isinstance(m, mc.TaggedAccept) else m
        if not self._voted(step, m.src, m.index, m.bal, m.val):
            return f"no proposal of ballot {m.bal} at index {m.index}"
        return None


def _environment_step(step: Step, base: Callable[[Any], Any]) -> Verdict:
    """Steps outside any replica, such as the timer, must not touch base state."""
    for x, (p, q) in enumerate(zip(step.pre, step.post)):
        d = _diff(base(p), base(q))
        if d:
            return Verdict("violation", f"{step.action.kind} changed server {x}: {d}")
    return Verdict("stutter")


def _is_phase1(m: Any) -> bool:
    return isinstance(m, (mp.Prepare, mp.PrepareOK, mc.TaggedPromise))


def _holder_closed(acks: set, now: int) -> set:
    """Largest subset whose live lease holders all acknowledged too."""
    acks = set(acks)
    while True:
        accs = {x.acc for x in acks}
        keep = {x for x in acks if all(p in accs for p, d in x.holders if d >= now)}
        if keep == acks:
            return acks
        acks = keep


# ---------------------------------------------------------- delta mapping


class DropDelta:
    """A derived protocol projected onto its base by dropping its extras."""

    def __init__(self, name: str, qs: QuorumSystem, concrete: str) -> None:
        self.name = name
        self.qs = qs
        self.concrete = concrete
        self.mod = lp if concrete in ("pql", "raftstar-pql") else mc

    def verify(self, step: Step, hist: History) -> Verdict:
        a = step.action.server
        if a < 0:
            return _environment_step(step, lambda s: s.base)
        for x, (p, q) in enumerate(zip(step.pre, step.post)):
            if x != a and p.base != q.base:
                return Verdict("violation", f"server {x} changed during a step of server {a}")
        tag = self.mod.classify(self.concrete, step.action.kind)
        pre, post = step.pre[a].base, step.post[a].base
        if tag == "added":
            if pre != post:
                return Verdict("violation", _diff(pre, post) or "added step changed the base state")
            return Verdict("stutter", "", ())
        base_act = self.mod.project_action(step.action)
        base = rs if isinstance(pre, rs.RaftState) else mp
        res = base.perform(pre, base_act, self.qs)
        if res is None:
            return Verdict("violation", f"base {base_act.kind} not enabled at server {a}", (base_act.kind,))
        s2, msgs = res
        d = _diff(s2, post)
        if d:
            return Verdict("violation", d, (base_act.kind,))
        want = set(msgs)
        got = {self.mod.project_msg(m) for m in step.emitted} - {None}
        if not _same_emissions(want, got, hist, self.mod.project_msg):
            return Verdict("violation", "emitted messages differ from the base step", (base_act.kind,))
        return Verdict("ok", "", (base_act.kind,))


# ------------------------------------------------------------- registry

MAPS = {
    "raftstar:paxos": ("raftstar", "multipaxos"),
    "pql:paxos": ("pql", "multipaxos"),
    "raftstar-pql:raftstar": ("raftstar-pql", "raftstar"),
    "raftstar-pql:pql": ("raftstar-pql", "pql"),
    "raftstar-mencius:raftstar": ("raftstar-mencius", "raftstar"),
    "coorpaxos:paxos": ("coorpaxos", "multipaxos"),
    "raftstar-mencius:coorpaxos": ("raftstar-mencius", "coorpaxos"),
}


def build_map(name: str, qs: QuorumSystem, mutated: bool = False):
    if name not in MAPS:
        raise ValueError(f"unknown map {name!r}; choose from {sorted(MAPS)}")
    concrete, _abstract = MAPS[name]
    if name == "raftstar:paxos":
        return RaftToPaxos(name, qs, "", chosen_full_log=mutated)
    if name == "raftstar-pql:pql":
        return RaftToPaxos(name, qs, "lease", chosen_full_log=mutated)
    if name == "raftstar-mencius:coorpaxos":
        return RaftToPaxos(name, qs, "coord", chosen_full_log=mutated)
    return DropDelta(name, qs, concrete)


def concrete_protocol(name: str) -> str:
    return MAPS[name][0]


def edge_checker(name: str, model: Any, mutated: bool = False) -> Callable:
    """Explorer hook: verify one edge of the concrete state graph."""
    if model.name != concrete_protocol(name):
        raise ValueError(f"map {name} does not apply to protocol {model.name}")
    ref = build_map(name, model.qs, mutated)

    def check(pre, act: Action, post) -> str | None:
        step = Step(pre.servers, act, post.servers, tuple(post.msgs - pre.msgs))
        v = ref.verify(step, History(pre.msgs, keep_all=True))
        if v.kind == "violation":
            return f"{v.detail} (abstract steps: {', '.join(v.abstract) or 'none'})"
        return "stutter" if v.kind == "stutter" else None

    return check


@dataclass
class TraceVerdict:
    map: str
    steps: int = 0
    ok: int = 0
    stutter: int = 0
    violations: list[tuple[int, str]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def classified(self) -> float:
        return 1.0 if not self.steps else (self.ok + self.stutter + len(self.violations)) / self.steps


def verify_steps(name: str, qs: QuorumSystem, steps: Iterable[Step], mutated: bool = False, limit: int = 20) -> TraceVerdict:
    """Check a whole run; message history is accumulated from the steps."""
    ref = build_map(name, qs, mutated)
    hist = History()
    out = TraceVerdict(name)
    for k, step in enumerate(steps):
        out.steps += 1
        v = ref.verify(step, hist)
        if v.kind == "violation":
            if len(out.violations) < limit:
                out.violations.append((k, f"{step.action.kind}@{step.action.server}: {v.detail}"))
        elif v.kind == "stutter":
            out.stutter += 1
        else:
            out.ok += 1
        hist.add(step.emitted)
    return out


# ------------------------------------------------------ non-mutation audit


@dataclass
class AuditReport:
    protocol: str
    tags: dict[str, str] = field(default_factory=dict)
    findings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.findings


def audit_non_mutation(protocol: str, steps: Iterable[Step]) -> AuditReport:
    """Check that the extra layer never writes base state outside modified steps.

    Every step kind is tagged ``added``, ``unchanged`` or ``modified``. Added
    steps must leave the base replica untouched, and unchanged steps must be
    exactly the base transition; the latter is what the delta map verifies,
    so the audit reports both in one pass.
    """
    mod = lp if protocol in ("pql", "raftstar-pql") else mc
    report = AuditReport(protocol)
    for k, step in enumerate(steps):
        kind = step.action.kind
        tag = mod.classify(protocol, kind)
        report.tags.setdefault(kind, tag)
        a = step.action.server
        if a < 0:
            for x, (p, q) in enumerate(zip(step.pre, step.post)):
                if p.base != q.base:
                    report.findings.append(f"step {k}: {kind} wrote base field {_diff(p.base, q.base)} of server {x}")
            continue
        pre, post = step.pre[a], step.post[a]
        if tag == "added" and pre.base != post.base:
            report.findings.append(f"step {k}: added step {kind} wrote base field {_diff(pre.base, post.base)}")
        elif tag == "unchanged":
            base = rs if isinstance(pre.base, rs.RaftState) else mp
            res = base.perform(pre.base, mod.project_action(step.action), QuorumSystem.majority(len(step.pre)))
            if res is None or res[0] != post.base:
                report.findings.append(f"step {k}: unchanged step {kind} differs from the base transition")
        for x, (p, q) in enumerate(zip(step.pre, step.post)):
            if x != a and p != q:
                report.findings.append(f"step {k}: {kind} at {a} wrote server {x}")
    return report
