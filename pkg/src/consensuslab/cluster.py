"""Discrete-event driver that runs one protocol's replicas over the simulated network.

The driver owns everything a real server keeps outside the replicated state:
timers, acknowledgment tables, client sessions and the key-value store. Each
replica transition is a ``Step`` (pre-states, action, post-states, emitted
messages) so that runs can be refinement-checked afterwards.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any, Callable

from . import lease_protocols as lp
from . import mencius_protocols as mc
from . import multipaxos as mp
from . import raftstar as rs
from .config import SimConfig
from .core import NOOP, NOVAL, Action, Command, Envelope, QuorumSystem, ballot_succ
from .refinement import Step
from .simnet import QUIESCENT, SimNet, Timer

RAFT_PROTOCOLS = frozenset({"raftstar", "raftstar-pql", "raftstar-mencius"})
LEASE_PROTOCOLS = frozenset({"pql", "raftstar-pql"})
COORD_PROTOCOLS = frozenset({"coorpaxos", "raftstar-mencius"})

# lease-layer actions that take the current tick as their last argument
CLOCKED = frozenset({"Accept", "Propose", "AppendEntries", "ReceiveAppend", "Learn", "LeaderLearn"})


# ------------------------------------------------------ driver-level messages


@dataclass(frozen=True, slots=True)
class Forward:
    cmd: Command
    origin: int


@dataclass(frozen=True, slots=True)
class ReadReply:
    op: str
    value: str | None


@dataclass(frozen=True, slots=True)
class Heartbeat:
    src: int
    bal: int


@dataclass(frozen=True, slots=True)
class HeartbeatOK:
    acc: int
    prefix: int


@dataclass(frozen=True, slots=True)
class PreVote:
    """Would you vote for me at ``term``? Asked before disturbing a live leader."""

    cand: int
    term: int
    last_index: int
    last_term: int


@dataclass(frozen=True, slots=True)
class PreVoteOK:
    acc: int
    term: int


@dataclass(frozen=True, slots=True)
class StaleTerm:
    """Sent back to a leader whose append was refused for carrying an old term."""

    acc: int
    term: int


@dataclass(frozen=True, slots=True)
class GrantSeen:
    """A lease holder telling its grantor that it is still reachable."""

    holder: int


@dataclass(frozen=True, slots=True)
class Bundle:
    """Several messages for one destination sent as a single envelope."""

    items: tuple[tuple[int, Any], ...]  # (group, message)


def unwrap(m: Any) -> Any:
    """Strip lease and skip-tag wrappers down to the base message."""
    while isinstance(m, (lp.LeaseAck, mc.TaggedPromise, mc.TaggedAccept, mc.TaggedAppend)):
        m = m.base
    return m


def base_of(s: Any) -> Any:
    return getattr(s, "base", s)


# ------------------------------------------------------------- bookkeeping


@dataclass
class Op:
    id: str
    site: int
    kind: str
    key: str
    invoked: int
    responded: int | None = None
    result: str | None = None
    local: bool = False
    messages: int = 0
    lease_at_invoke: bool = False
    reply_to: int | None = None  # set on a leader serving a forwarded lease read

    @property
    def cmd(self) -> Command:
        return Command(self.kind, self.key, self.id)


@dataclass
class Peer:
    """Volatile per-server, per-group driver state."""

    last_heard: int = 0
    timeout: int = 0
    leader_hint: int | None = None
    votes: dict = field(default_factory=dict)
    prevotes: set = field(default_factory=set)
    prevote_term: int | None = None
    seen_term: int = -1  # highest term observed in any election traffic
    deposed: bool = False  # a leader that learned of a higher term stops leading
    acks: dict = field(default_factory=dict)
    ack_term: int = -2
    match: dict = field(default_factory=dict)
    next_slot: int = 0
    proposed_at: dict = field(default_factory=dict)
    prefixes: dict = field(default_factory=dict)
    unsent: list = field(default_factory=list)


@dataclass
class Event:
    kind: str
    payload: Any


class Simulation:
    def __init__(
        self,
        cfg: SimConfig,
        *,
        keep_steps: bool = False,
        check_invariants: bool = False,
        recorder: Any = None,
    ) -> None:
        self.cfg = cfg
        self.n = n = cfg.n
        self.protocol = p = cfg.protocol
        self.flags = frozenset(cfg.flags)
        self.qs = QuorumSystem.majority(n)
        self.raft = p in RAFT_PROTOCOLS
        self.lease = p in LEASE_PROTOCOLS
        self.coord = p in COORD_PROTOCOLS
        self.groups = n if self.coord else 1
        self.replica = lp if self.lease else mc if self.coord else rs if self.raft else mp
        self.states: list[tuple] = [tuple(self._init(x, g) for x in range(n)) for g in range(self.groups)]
        self.net = SimNet(n, cfg.rtt_matrix(), cfg.fault_schedule(), cfg.seed)
        self.work_rng = random.Random(f"workload/{cfg.seed}")
        self.timer_rng = random.Random(f"timers/{cfg.seed}")
        self.peers = [[Peer() for _ in range(n)] for _ in range(self.groups)]
        self.steps: list[list[Step]] | None = [[] for _ in range(self.groups)] if keep_steps else None
        self.check_invariants = check_invariants
        self.recorder = recorder
        self.now = 0
        self.event = Event("start", None)
        self.step_count = 0
        self.violations: list[tuple[int, str]] = []
        self.ops: dict[str, Op] = {}
        self.kv: list[dict[str, str]] = [{} for _ in range(n)]
        self.applied: list[list[str]] = [[] for _ in range(n)]  # op id (or "noop") per executed position
        self.applied_ops: list[set[str]] = [set() for _ in range(n)]
        self.exec_next = [0] * n
        self.effect_tick: dict[str, int] = {}
        self.proposed: dict[tuple[int, int], tuple[int, int]] = {}  # (group, index) -> (tick, proposer)
        self.first_proposer: dict[str, int] = {}
        self.proposal_tick: dict[str, int] = {}
        self.exec_at_proposer: dict[str, int] = {}
        self.commit_ticks: dict[tuple[int, int], int] = {}
        self.own_commit: dict[str, int] = {}  # op id -> tick its proposer saw it commit
        self.pending_reads: list[list[Op]] = [[] for _ in range(n)]
        self.heard: list[list[int | None]] = [[None] * n for _ in range(n)]  # [x][y]: last tick x heard y
        self.messages = 0
        self.outbox: list[tuple[int, int, int, Any]] = []
        self.clients: list[dict] = []
        self.settle_until: int | None = None
        t = cfg.timing
        max_rtt = max(max(r) for r in self.net.rtt) if n > 1 else 0
        self.settle = t.settle_ticks if t.settle_ticks is not None else 4 * max_rtt + 3 * t.heartbeat_ticks
        self.max_ticks = t.max_ticks or (cfg.workload.duration_ticks + 20 * max(t.retry_ticks, 1000))
        self.finished = False

    # ----------------------------------------------------------- replicas

    def _init(self, x: int, g: int) -> Any:
        n = self.n
        if self.coord:
            return mc.init_coord(x, n, g, raft=self.raft)
        if self.lease:
            return lp.init_raft_pql(x, n) if self.raft else lp.init_pql(x, n)
        return rs.init_state(x) if self.raft else mp.init_state(x)

    def base(self, g: int, x: int) -> Any:
        return base_of(self.states[g][x])

    def _step(self, g: int, x: int, kind: str, *args: Any) -> tuple[Any, tuple] | None:
        if self.lease and kind in CLOCKED:
            args = (*args, self.now)
        act = Action(kind, x, tuple(args))
        pre = self.states[g]
        out = self.replica.perform(pre[x], act, self.qs, self.flags)
        if out is None:
            return None
        s2, emitted = out
        emitted = tuple(emitted)
        post = pre[:x] + (s2,) + pre[x + 1:]
        self.states[g] = post
        self.step_count += 1
        if self.steps is not None:
            self.steps[g].append(Step(pre, act, post, emitted))
        if self.recorder is not None:
            self.recorder.step(self, g, x, act, pre[x], s2, emitted)
        if self.check_invariants and s2 != pre[x]:
            self._check_invariants(g, act)
        return s2, emitted

    def _check_invariants(self, g: int, act: Action) -> None:
        states = list(self.states[g])
        bases = [base_of(s) for s in states]
        checks: list[Callable[[], str | None]] = []
        if self.raft:
            checks += [
                lambda: rs.check_log_matching(bases),
                lambda: rs.check_election_safety(bases),
                lambda: rs.check_commit_agreement(bases),
                lambda: rs.check_log_ballot(bases),
            ]
        else:
            checks += [lambda: mp.check_agreement(bases, self.qs), lambda: mp.check_one_value_per_ballot(bases)]
        if self.lease:
            checks.append(lambda: lp.check_runtime_lease_inv(states, self.qs, self.now))
        if self.coord:
            checks += [lambda: mc.check_skip_safety(states, self.qs), lambda: mc.check_tags_on_noops(states)]
        for c in checks:
            bad = c()
            if bad:
                self.violations.append((self.step_count, f"{act.kind}@{act.server} group {g}: {bad}"))
                return

    # ----------------------------------------------------------- network

    def _send(self, src: int, dst: int, msg: Any, g: int) -> None:
        if dst == src:
            return
        self.outbox.append((src, dst, g, msg))

    def _broadcast(self, src: int, msg: Any, g: int) -> None:
        for d in range(self.n):
            self._send(src, d, msg, g)

    def _flush(self) -> None:
        out, self.outbox = self.outbox, []
        if self.coord and self.cfg.mencius.skip_piggyback:
            merged: dict[tuple[int, int], list[tuple[int, Any]]] = {}
            for src, dst, g, msg in out:
                merged.setdefault((src, dst), []).append((g, msg))
            batch = []
            for (src, dst), items in merged.items():
                if len(items) == 1:
                    batch.append((src, dst, items[0][0], items[0][1]))
                else:
                    batch.append((src, dst, items[0][0], Bundle(tuple(items))))
            out = batch
        for src, dst, g, msg in out:
            copies = self.net.send(Envelope(src, dst, self.now, msg, g))
            self.messages += len(copies)
            self._charge(msg, len(copies))
            if self.recorder is not None:
                for c in copies:
                    self.recorder.envelope(self, c)

    def _charge(self, msg: Any, copies: int) -> None:
        """Attribute network messages to the client operations they carry."""
        for cmd in _carried_commands(msg):
            op = self.ops.get(cmd.payload)
            if op is not None:
                op.messages += copies
        if isinstance(msg, ReadReply) and msg.op in self.ops:
            self.ops[msg.op].messages += copies

    # ------------------------------------------------------------ running

    def run(self) -> "Simulation":
        self._start()
        self._flush()
        while not self.finished:
            ev = self.net.next_event()
            if ev is QUIESCENT:
                break
            self.now = self.net.clock
            if self.now > self.max_ticks or (self.settle_until is not None and self.now > self.settle_until):
                break
            if isinstance(ev, Timer):
                self.event = Event(f"timer:{ev.kind}", (ev.server, ev.data))
                self._on_timer(ev)
            else:
                self.event = Event(f"deliver:{type(ev.payload).__name__}", ev.payload)
                self._deliver(ev)
            self._flush()
        self.finished = True
        return self

    def _start(self) -> None:
        cfg, n = self.cfg, self.n
        t = cfg.timing
        for g in range(self.groups):
            for x in range(n):
                p = self.peers[g][x]
                p.timeout = self._election_timeout()
                self.net.set_timer(t.heartbeat_ticks, Timer(x, "heartbeat", g))
                if self.coord:
                    p.leader_hint = mc.default_leader(g, n)
                    if x == p.leader_hint:
                        p.match = {y: -1 for y in range(n) if y != x}
                    if cfg.mencius.suspicion_timeout_ticks:
                        self.net.set_timer(cfg.mencius.suspicion_timeout_ticks, Timer(x, "suspect", g))
                else:
                    self.net.set_timer(p.timeout, Timer(x, "election", g))
        if self.lease:
            for x in range(n):
                self.net.set_timer(0, Timer(x, "renew"))
        if not self.coord:
            self._start_election(0, 0)
        w = cfg.workload
        sites = w.sites if w.sites is not None else tuple(range(n))
        for x in sites:
            for c in range(w.clients_per_site):
                self.clients.append({"site": x, "client": c, "issued": 0, "busy": False})
                self.net.set_timer(c, Timer(x, "client", len(self.clients) - 1))
        if not self.clients:
            self.settle_until = self.settle

    def _election_timeout(self) -> int:
        base = self.cfg.timing.election_timeout_ticks
        return base + self.timer_rng.randrange(base)

    # ------------------------------------------------------------- timers

    def _on_timer(self, ev: Timer) -> None:
        x, kind = ev.server, ev.kind
        if kind == "client":
            self._client_next(ev.data)
        elif kind == "heartbeat":
            self._heartbeat(ev.data, x)
            self.net.set_timer(self.now + self.cfg.timing.heartbeat_ticks, ev)
        elif kind == "election":
            g = ev.data
            p = self.peers[g][x]
            if self._leading(g, x):
                p.last_heard = self.now
            elif self.now - p.last_heard >= p.timeout:
                p.last_heard = self.now
                p.timeout = self._election_timeout()
                self._campaign(g, x)
            self.net.set_timer(max(self.now + 1, p.last_heard + p.timeout), ev)
        elif kind == "renew":
            self._renew_leases(x)
            self.net.set_timer(self.now + self.cfg.lease.renew_interval_ticks, ev)
        elif kind == "retry":
            self._retry(ev.data)
        elif kind == "suspect":
            self._suspect(ev.data, x)
            self.net.set_timer(self.now + self.cfg.mencius.suspicion_timeout_ticks, ev)
        else:
            raise ValueError(f"unknown timer {kind!r}")

    def _leading(self, g: int, x: int) -> bool:
        return self.base(g, x).leader and not self.peers[g][x].deposed

    def _heartbeat(self, g: int, x: int) -> None:
        if not self._leading(g, x):
            return
        if self.raft:
            self._raft_append(g, x, ())
        else:
            self._paxos_heartbeat(g, x)

    # ------------------------------------------------------------ delivery

    def _deliver(self, env: Envelope) -> None:
        self.heard[env.dst][env.src] = self.now
        if isinstance(env.payload, Bundle):
            for g, m in env.payload.items:
                self._handle(env.src, env.dst, g, m)
        else:
            self._handle(env.src, env.dst, env.group, env.payload)

    def _handle(self, src: int, y: int, g: int, m: Any) -> None:
        b = unwrap(m)
        if isinstance(b, rs.RequestVote):
            self._on_request_vote(g, y, m)
        elif isinstance(b, (rs.RequestVoteOK, mp.PrepareOK)):
            self._on_promise(g, y, m)
        elif isinstance(b, rs.Append):
            self._on_append(g, y, m)
        elif isinstance(b, rs.AppendOK):
            self._on_append_ok(g, y, m)
        elif isinstance(b, mp.Prepare):
            self._on_prepare(g, y, m)
        elif isinstance(b, mp.Accept):
            self._on_accept(g, y, m)
        elif isinstance(b, mp.AcceptOK):
            self._on_accept_ok(g, y, m)
        elif isinstance(b, lp.LeaseGrant):
            if self._step(g, y, "ReceiveLease", m, self.now):
                self._serve_pending_reads(y)
            self._send(y, src, GrantSeen(y), g)
        elif isinstance(b, GrantSeen):
            pass  # delivery itself refreshes the contact table
        elif isinstance(b, StaleTerm):
            p = self.peers[g][y]
            p.seen_term = max(p.seen_term, b.term)
            if self.base(g, y).leader and b.term > self.base(g, y).term:
                p.deposed, p.leader_hint = True, None
        elif isinstance(b, PreVote):
            self._on_prevote(g, y, b)
        elif isinstance(b, PreVoteOK):
            self._on_prevote_ok(g, y, b)
        elif isinstance(b, Heartbeat):
            p = self.peers[g][y]
            if b.bal >= self.base(g, y).ballot:
                p.last_heard, p.leader_hint = self.now, b.src
                self._flush_unsent(y)
            self._send(y, src, HeartbeatOK(y, self._prefix(g, y)), g)
        elif isinstance(b, HeartbeatOK):
            self.peers[g][y].prefixes[b.acc] = b.prefix
        elif isinstance(b, Forward):
            self._on_forward(y, b)
        elif isinstance(b, ReadReply):
            op = self.ops.get(b.op)
            if op is not None and op.responded is None:
                self._respond(op, b.value, local=False)
        else:
            raise TypeError(f"unexpected message {type(m).__name__}")

    # --------------------------------------------------------------- phase 1

    def _campaign(self, g: int, x: int) -> None:
        """Raft servers poll a quorum first so an isolated server cannot inflate its term."""
        if not self.raft or self.n == 1:
            self._start_election(g, x)
            return
        b = self.base(g, x)
        p = self.peers[g][x]
        p.prevote_term, p.prevotes = ballot_succ(max(b.term, p.seen_term), x, self.n), {x}
        self._broadcast(x, PreVote(x, p.prevote_term, b.last_index, b.last_term), g)

    def _on_prevote(self, g: int, y: int, m: PreVote) -> None:
        b = self.base(g, y)
        p = self.peers[g][y]
        p.seen_term = max(p.seen_term, m.term)
        quiet = self.now - p.last_heard >= self.cfg.timing.election_timeout_ticks
        if self._leading(g, y) or not quiet or m.term <= b.term:
            return
        if not rs.up_to_date(b, rs.RequestVote(m.cand, m.term, m.last_index, m.last_term)):
            return
        self._send(y, m.cand, PreVoteOK(y, m.term), g)

    def _on_prevote_ok(self, g: int, x: int, m: PreVoteOK) -> None:
        p = self.peers[g][x]
        if m.term != p.prevote_term or self.base(g, x).leader:
            return
        p.prevotes.add(m.acc)
        if self.qs.contains_quorum(p.prevotes):
            term, p.prevote_term, p.prevotes = p.prevote_term, None, set()
            if term > self.base(g, x).term:
                self._start_election(g, x, term)

    def _start_election(self, g: int, x: int, term: int | None = None) -> None:
        p = self.peers[g][x]
        p.votes, p.leader_hint = {}, None
        if self.raft:
            out = self._step(g, x, "RequestVote", *(() if term is None else (term,)))
            if out is None:
                return
            _, (req, own) = out
        else:
            b = term if term is not None else ballot_succ(self.base(g, x).ballot, x, self.n)
            if self._step(g, x, "IncreaseBallot", b) is None:
                return
            out = self._step(g, x, "Phase1a")
            if out is None:
                return
            _, (req, own) = out
        p.votes[x] = own
        self._broadcast(x, req, g)
        self._try_become_leader(g, x)

    def _on_request_vote(self, g: int, y: int, m: rs.RequestVote) -> None:
        self.peers[g][y].seen_term = max(self.peers[g][y].seen_term, m.term)
        out = self._step(g, y, "ReceiveVote", m)
        if out is not None:
            self.peers[g][y].last_heard = self.now
            self._send(y, m.cand, out[1][0], g)

    def _on_prepare(self, g: int, y: int, m: mp.Prepare) -> None:
        out = self._step(g, y, "Phase1b", m)
        if out is not None:
            self.peers[g][y].last_heard = self.now
            self._send(y, m.src, out[1][0], g)

    def _on_promise(self, g: int, x: int, m: Any) -> None:
        b = self.base(g, x)
        ballot = b.term if self.raft else b.ballot
        if b.leader or m.bal_or_term != ballot:
            return
        self.peers[g][x].votes[m.acc] = m
        self._try_become_leader(g, x)

    def _try_become_leader(self, g: int, x: int) -> None:
        p = self.peers[g][x]
        if not self.qs.contains_quorum(p.votes):
            return
        if self._step(g, x, "BecomeLeader", frozenset(p.votes.values())) is None:
            return
        p.votes, p.leader_hint, p.deposed = {}, x, False
        p.acks, p.ack_term, p.prefixes = {}, -2, {}
        p.match = {y: -1 for y in range(self.n) if y != x}
        if self.raft:
            vals = [] if self._coord_recovery(g, x) else [NOOP]
            self._raft_append(g, x, vals + self._take_unsent(g, x))
        else:
            b = self.base(g, x)
            for i in range(b.log_tail + 1):
                v = b.entry(i).val
                self._paxos_propose(g, x, i, NOOP if v is NOVAL else v)
            p.next_slot = b.log_tail + 1
            for cmd in self._take_unsent(g, x):
                self._propose_command(g, x, cmd)
        if self.coord:
            self._fill_recovered_group(g, x)

    def _take_unsent(self, g: int, x: int) -> list[Command]:
        out = [c for c in self.peers[g][x].unsent if self._loggable(g, x, c)]
        self.peers[g][x].unsent = []
        return out

    # ------------------------------------------------------------ Raft* side

    def _raft_append(self, g: int, x: int, vals: Any) -> bool:
        vals = tuple(vals)
        b = self.base(g, x)
        p = self.peers[g][x]
        prev = min([b.last_index, *p.match.values()])
        first = b.last_index + 1
        out = self._step(g, x, "AppendEntries", vals, prev)
        if out is None:
            return False
        _, (msg, _own) = out
        for k, v in enumerate(vals):
            self._note_proposal(g, x, first + k, v)
        self._broadcast(x, msg, g)
        self._raft_learn(g, x)
        return True

    def _on_append(self, g: int, y: int, m: Any) -> None:
        a = unwrap(m)
        p = self.peers[g][y]
        if a.term >= self.base(g, y).term:
            p.last_heard, p.leader_hint = self.now, a.leader
        before = self.base(g, y).commit
        out = self._step(g, y, "ReceiveAppend", m)
        if out is None and a.term < self.base(g, y).term:
            self._send(y, a.leader, StaleTerm(y, self.base(g, y).term), g)
        if out is not None:
            self._send(y, a.leader, out[1][0], g)
            self._flush_unsent(y)
            if self.base(g, y).commit > before or self.coord:
                self._committed(g, y, before)
        if self.coord:
            self._observe(g, y, a.last)

    def _on_append_ok(self, g: int, x: int, m: Any) -> None:
        a = unwrap(m)
        b = self.base(g, x)
        p = self.peers[g][x]
        if not b.leader or a.term != b.term:
            return
        if p.ack_term != b.term:
            p.acks, p.ack_term = {}, b.term
        old = p.acks.get(a.acc)
        if old is None or unwrap(old).last_index <= a.last_index:
            p.acks[a.acc] = m
        p.match[a.acc] = max(p.match.get(a.acc, -1), a.last_index)
        self._raft_learn(g, x)

    def _raft_learn(self, g: int, x: int) -> None:
        b = self.base(g, x)
        p = self.peers[g][x]
        if not b.leader:
            return
        acks = list(p.acks.values()) if p.ack_term == b.term else []
        ranked = sorted(acks, key=lambda k: (-unwrap(k).last_index, k.acc))
        chosen = ranked[: self.qs.f]
        if self.lease:
            s = self.states[g][x]
            holders = {h for k in chosen for h, d in k.holders if d >= self.now}
            holders |= {h for h, _ in lp.granted_holders(s, self.now)}
            holders.discard(x)
            chosen += [p.acks[h] for h in sorted(holders) if h in p.acks and p.acks[h] not in chosen]
        before = b.commit
        if self._step(g, x, "LeaderLearn", frozenset(chosen)) is None:
            return
        self._committed(g, x, before)
        self._raft_append(g, x, ())  # tell followers right away

    # ------------------------------------------------------------ Paxos side

    def _paxos_propose(self, g: int, x: int, i: int, v: Any) -> bool:
        out = self._step(g, x, "Propose", i, v)
        if out is None:
            return False
        _, (msg, own) = out
        p = self.peers[g][x]
        if i not in p.proposed_at:
            self._note_proposal(g, x, i, v)
        p.proposed_at[i] = self.now
        p.next_slot = max(p.next_slot, i + 1)
        self._broadcast(x, msg, g)
        self._broadcast(x, own, g)
        self._on_accept_ok(g, x, own)
        return True

    def _on_accept(self, g: int, y: int, m: Any) -> None:
        a = unwrap(m)
        p = self.peers[g][y]
        if a.bal >= self.base(g, y).ballot:
            p.last_heard, p.leader_hint = self.now, a.src
        out = self._step(g, y, "Accept", m)
        if out is not None:
            ack = out[1][0]
            self._broadcast(y, ack, g)
            self._on_accept_ok(g, y, ack)
            self._flush_unsent(y)
            if self.coord:
                self._execute(y)
        if self.coord:
            self._observe(g, y, a.index)

    def _on_accept_ok(self, g: int, y: int, m: Any) -> None:
        a = unwrap(m)
        if self.base(g, y).chosen_at(a.index) is not None:
            return
        table = self.peers[g][y].acks.setdefault(a.index, {})
        old = table.get(a.acc)
        if old is None or unwrap(old).bal <= a.bal:
            table[a.acc] = m
        same = frozenset(k for k in table.values() if (unwrap(k).bal, unwrap(k).val) == (a.bal, a.val))
        if not self.qs.contains_quorum(k.acc for k in same) and "learn_with_f" not in self.flags:
            return
        if self._step(g, y, "Learn", same) is None:
            return
        self.peers[g][y].acks.pop(a.index, None)
        self._note_commit(g, y, a.index, a.val)
        self._execute(y)

    def _prefix(self, g: int, y: int) -> int:
        b = self.base(g, y)
        if self.raft:
            return b.commit
        i = -1
        while b.chosen_at(i + 1) is not None:
            i += 1
        return i

    def _paxos_heartbeat(self, g: int, x: int) -> None:
        b = self.base(g, x)
        p = self.peers[g][x]
        self._broadcast(x, Heartbeat(x, b.ballot), g)
        known = [p.prefixes.get(y, -1) for y in range(self.n) if y != x]
        low = min([self._prefix(g, x), *known])
        stale = self.now - self.cfg.timing.heartbeat_ticks
        resent = 0
        for i in range(low + 1, p.next_slot):
            if resent >= 16:
                break
            if p.proposed_at.get(i, self.now) > stale:
                continue
            v = b.entry(i).val
            if v is NOVAL:
                v = NOOP
            if self._paxos_propose(g, x, i, v):
                resent += 1

    # ---------------------------------------------------------- commands

    def _note_proposal(self, g: int, x: int, i: int, v: Any) -> None:
        self.proposed.setdefault((g, i), (self.now, x))
        if isinstance(v, Command):
            self.first_proposer.setdefault(v.payload, x)
            self.proposal_tick.setdefault(v.payload, self.now)

    def _loggable(self, g: int, x: int, cmd: Command) -> bool:
        """A server holding a quorum lease never logs reads."""
        if self.lease and cmd.is_read and lp.holds_quorum_lease(self.states[g][x], self.qs, self.now):
            return False
        return True

    def _in_log(self, g: int, x: int, cmd: Command) -> bool:
        b = self.base(g, x)
        if self.raft:
            return any(e.val == cmd for e in b.log)
        return any(b.entry(i).val == cmd or b.chosen_at(i) == cmd for i in range(b.log_tail + 1))

    def _propose_command(self, g: int, x: int, cmd: Command) -> bool:
        if not cmd.is_read and self._in_log(g, x, cmd):
            return True  # a retry of something already being replicated
        if self.raft:
            return self._raft_append(g, x, (cmd,))
        p = self.peers[g][x]
        return self._paxos_propose(g, x, max(p.next_slot, self.base(g, x).log_tail + 1), cmd)

    def _submit(self, x: int, op: Op) -> None:
        """Route a client command from its site into the replicated log."""
        cmd = op.cmd
        if self.coord:
            g = self._own_group(x)
            if g is not None:
                self._propose_command(g, x, cmd)
                return
            self._send(x, (x + 1) % self.n, Forward(cmd, x), x)
            return
        if self._leading(0, x):
            if self._loggable(0, x, cmd):
                self._propose_command(0, x, cmd)
            else:
                op.reply_to = None
                self.pending_reads[x].append(op)
                self._serve_pending_reads(x)
            return
        self._forward_or_queue(0, x, cmd)

    def _forward_or_queue(self, g: int, x: int, cmd: Command) -> None:
        hint = self.peers[g][x].leader_hint
        if hint is not None and hint != x:
            self._send(x, hint, Forward(cmd, x), g)
        else:
            self.peers[g][x].unsent.append(cmd)

    def _flush_unsent(self, x: int) -> None:
        for g in range(self.groups):
            p = self.peers[g][x]
            if p.unsent and p.leader_hint is not None and p.leader_hint != x:
                cmds, p.unsent = p.unsent, []
                for c in cmds:
                    self._send(x, p.leader_hint, Forward(c, x), g)

    def _on_forward(self, y: int, m: Forward) -> None:
        if self.coord:
            g = self._own_group(y)
            if g is not None:
                self._propose_command(g, y, m.cmd)
            return
        if not self._leading(0, y):
            return  # the origin retries
        if self._loggable(0, y, m.cmd):
            self._propose_command(0, y, m.cmd)
            return
        op = Op(m.cmd.payload, m.origin, m.cmd.op, m.cmd.key, self.now, reply_to=m.origin)
        self.pending_reads[y].append(op)
        self._serve_pending_reads(y)

    def _retry(self, op_id: str) -> None:
        op = self.ops[op_id]
        if op.responded is not None:
            return
        if op in self.pending_reads[op.site]:
            self.pending_reads[op.site].remove(op)
        self._submit(op.site, op)
        self.net.set_timer(self.now + self.cfg.timing.retry_ticks, Timer(op.site, "retry", op.id))

    # ------------------------------------------------------------- reads

    def _serve_pending_reads(self, x: int) -> None:
        if not self.pending_reads[x]:
            return
        waiting, self.pending_reads[x] = self.pending_reads[x], []
        s = self.states[0][x]
        for op in waiting:
            if op.reply_to is None and op.responded is not None:
                continue
            if self._step(0, x, "LocalRead", op.key, self.now) is not None:
                value = self.kv[x].get(op.key)
                if op.reply_to is None:
                    self._respond(op, value, local=True)
                else:
                    self._send(x, op.reply_to, ReadReply(op.id, value), 0)
            elif lp.holds_quorum_lease(s, self.qs, self.now) or op.reply_to is not None:
                self.pending_reads[x].append(op)
            else:
                self._submit(x, op)  # lease lapsed: fall back to the log

    # ------------------------------------------------------------- leases

    def _renew_leases(self, x: int) -> None:
        """Extend leases to every holder heard from recently; silent holders are let lapse."""
        holders = self.cfg.lease.holders
        fresh = self.cfg.lease.lease_duration_ticks // 2
        for h in holders if holders is not None else range(self.n):
            last = self.heard[x][h]
            if h != x and self.now >= fresh and (last is None or self.now - last > fresh):
                continue
            out = self._step(0, x, "GrantLease", h, self.now, self.cfg.lease.lease_duration_ticks)
            if out is None:
                continue
            grant = out[1][0]
            if h == x:
                self._step(0, x, "ReceiveLease", grant, self.now)
            else:
                self._send(x, h, grant, 0)
        self._serve_pending_reads(x)

    # ----------------------------------------------------------- Mencius

    def _own_group(self, x: int) -> int | None:
        """The group this server leads as default leader, if it still does."""
        s = self.states[x][x]
        return x if mc.is_default(s, self.n) and s.base.leader else None

    def _observe(self, g: int, y: int, k: int) -> None:
        """Traffic at group ``g`` index ``k``: skip own indices ordered before it."""
        if g == y or self._own_group(y) is None:
            return
        target = k if y < g else k - 1
        self._skip_to(y, target)

    def _skip_to(self, y: int, target: int) -> None:
        if self.raft:
            cur = self.base(y, y).last_index
            if target > cur:
                self._raft_append(y, y, (NOOP,) * (target - cur))
        else:
            p = self.peers[y][y]
            for i in range(p.next_slot, target + 1):
                self._paxos_propose(y, y, i, NOOP)

    def _suspect(self, g: int, x: int) -> None:
        """Take over a group whose leader has gone quiet while execution waits on it."""
        if g == x or self.base(g, x).leader:
            return
        p = self.peers[g][x]
        if self.now - p.last_heard < self.cfg.mencius.suspicion_timeout_ticks:
            return
        gi = self.exec_next[x]
        if gi % self.n != g:
            return
        p.last_heard = self.now
        self._start_election(g, x)

    def _coord_recovery(self, g: int, x: int) -> bool:
        return self.coord and not mc.is_default(self.states[g][x], self.n)

    def _fill_recovered_group(self, g: int, x: int) -> None:
        """A recovery leader closes the gap in a taken-over group with no-ops."""
        if not self._coord_recovery(g, x):
            return
        top = max(self._group_reach(h) for h in range(self.groups))
        target = top // self.n + 1
        if self.raft:
            cur = self.base(g, x).last_index
            target = max(target, cur + 1)
            if target > cur:
                self._raft_append(g, x, (NOOP,) * (target - cur))
        else:
            p = self.peers[g][x]
            for i in range(p.next_slot, target + 1):
                self._paxos_propose(g, x, i, NOOP)

    def _group_reach(self, g: int) -> int:
        """Highest global position any server knows of in group ``g``."""
        top = -1
        for s in self.states[g]:
            b = base_of(s)
            last = b.last_index if self.raft else b.log_tail
            if last >= 0:
                top = max(top, last * self.n + g)
        return top

    # ----------------------------------------------------------- execution

    def _committed(self, g: int, y: int, before: int) -> None:
        b = self.base(g, y)
        for i in range(before + 1, b.commit + 1):
            self._note_commit(g, y, i, b.entry(i).val)
        self._execute(y)

    def _note_commit(self, g: int, y: int, i: int, v: Any) -> None:
        self.commit_ticks.setdefault((g, i), self.now)
        if isinstance(v, Command) and self.first_proposer.get(v.payload) == y:
            self.own_commit.setdefault(v.payload, self.now)

    def _decided(self, x: int, gi: int) -> tuple[bool, Any]:
        g, k = (gi % self.n, gi // self.n) if self.coord else (0, gi)
        s = self.states[g][x]
        b = base_of(s)
        if self.raft:
            if k <= b.commit:
                return True, b.entry(k).val
        else:
            v = b.chosen_at(k)
            if v is not None:
                return True, v
        if self.coord and k in s.executable:
            return True, NOOP
        return False, None

    def _execute(self, x: int) -> None:
        while True:
            gi = self.exec_next[x]
            ok, v = self._decided(x, gi)
            if not ok:
                break
            if self.lease and self._step(0, x, "Apply", gi) is None:
                break
            self.exec_next[x] = gi + 1
            self._apply(x, gi, v)
        if self.lease:
            self._serve_pending_reads(x)

    def _apply(self, x: int, gi: int, v: Any) -> None:
        if not isinstance(v, Command):
            self.applied[x].append("noop")
            return
        op_id = v.payload
        if op_id in self.applied_ops[x]:
            self.applied[x].append("dup")
            return
        self.applied_ops[x].add(op_id)
        self.applied[x].append(op_id)
        result = None
        if v.is_read:
            result = self.kv[x].get(v.key)
        else:
            self.kv[x][v.key] = op_id
        if self.first_proposer.get(op_id) == x:
            self.exec_at_proposer.setdefault(op_id, self.now)
        if op_id not in self.effect_tick:
            self.effect_tick[op_id] = self.now
            if self.recorder is not None:
                self.recorder.commit(self, x, gi, v)
        op = self.ops.get(op_id)
        if op is not None and op.site == x and op.responded is None:
            self._respond(op, result, local=False)

    # ------------------------------------------------------------- clients

    def _client_next(self, idx: int) -> None:
        c = self.clients[idx]
        w = self.cfg.workload
        limit_hit = w.ops_per_client is not None and c["issued"] >= w.ops_per_client
        if limit_hit or self.now >= w.duration_ticks:
            c["done"] = True
            self._maybe_settle()
            return
        x = c["site"]
        kind = "read" if self.work_rng.random() < w.read_ratio else "write"
        if self.work_rng.random() < w.conflict_rate:
            key = w.popular_key
        else:
            key = f"k{x}.{c['client']}.{self.work_rng.randrange(w.key_space)}"
        op = Op(f"{x}.{c['client']}.{c['issued']}", x, kind, key, self.now)
        c["issued"] += 1
        c["op"] = op.id
        self.ops[op.id] = op
        if self.recorder is not None:
            self.recorder.invoke(self, op)
        self.net.set_timer(self.now + self.cfg.timing.retry_ticks, Timer(x, "retry", op.id))
        if self.lease and kind == "read" and lp.holds_quorum_lease(self.states[0][x], self.qs, self.now):
            op.lease_at_invoke = True
            self.pending_reads[x].append(op)
            self._serve_pending_reads(x)
            return
        self._submit(x, op)

    def _respond(self, op: Op, value: str | None, local: bool) -> None:
        op.responded, op.result, op.local = self.now, value, local
        if op in self.pending_reads[op.site]:
            self.pending_reads[op.site].remove(op)
        if self.recorder is not None:
            self.recorder.respond(self, op)
        for idx, c in enumerate(self.clients):
            if c.get("op") == op.id:
                self.net.set_timer(self.now + self.cfg.workload.think_ticks, Timer(c["site"], "client", idx))
                break

    def _maybe_settle(self) -> None:
        if self.settle_until is None and all(c.get("done") for c in self.clients):
            if all(op.responded is not None for op in self.ops.values()):
                self.settle_until = self.now + self.settle


def _carried_commands(msg: Any) -> list[Command]:
    if isinstance(msg, Bundle):
        return [c for _, m in msg.items for c in _carried_commands(m)]
    m = unwrap(msg)
    if isinstance(m, Forward):
        return [m.cmd]
    if isinstance(m, rs.Append):
        return [e.val for e in m.entries if isinstance(e.val, Command)]
    if isinstance(m, mp.Accept) and isinstance(m.val, Command):
        return [m.val]
    return []
