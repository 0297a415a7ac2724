"""Running, recording, replaying and checking simulated runs.

A trace is line-delimited JSON. The first line is a header naming the format
version, protocol, configuration hash, seed and flags (plus the full
configuration so the run can be re-executed). Every replica step, client
invocation and response, first execution of a command, and network send
follows as one record, and an ``end`` record closes the file with the final
state digests.
"""

from __future__ import annotations

import json
import random
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from . import lease_protocols as lp
from . import mencius_protocols as mc
from .cluster import COORD_PROTOCOLS, LEASE_PROTOCOLS, Op, Simulation
from .config import SimConfig
from .core import Command, QuorumSystem, digest
from .refinement import MAPS, AuditReport, TraceVerdict, audit_non_mutation, concrete_protocol, verify_steps

FORMAT_VERSION = 1


class TraceError(Exception):
    """A trace that cannot be replayed as recorded."""


class ReplayRefused(TraceError):
    pass


class ReplayDivergence(TraceError):
    def __init__(self, seq: int, detail: str) -> None:
        super().__init__(f"replay diverged at seq {seq}: {detail}")
        self.seq = seq


class TruncatedTrace(TraceError):
    def __init__(self, seq: int, detail: str) -> None:
        super().__init__(f"trace is discontinuous at seq {seq}: {detail}")
        self.seq = seq


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- recording


def _plain(rec: dict) -> dict:
    return json.loads(json.dumps(rec))


class TraceRecorder:
    """Turns simulation callbacks into trace records.

    With ``full=False`` only client, commit and end records are kept, which is
    all the read-consistency check needs and avoids hashing every state.
    """

    def __init__(self, sink: Callable[[dict], None], full: bool = True) -> None:
        self.sink = sink
        self.full = full
        self.seq = 0
        self._state_digests: dict[tuple[int, int], tuple[Any, str]] = {}
        self._event: tuple[Any, str] | None = None

    def _emit(self, rec: dict) -> None:
        self.seq += 1
        self.sink(_plain({"seq": self.seq, **rec}))

    def _digest_state(self, g: int, x: int, s: Any) -> str:
        hit = self._state_digests.get((g, x))
        if hit is not None and hit[0] is s:
            return hit[1]
        d = digest(s)
        self._state_digests[(g, x)] = (s, d)
        return d

    def _event_digest(self, sim: Simulation) -> str:
        if self._event is None or self._event[0] is not sim.event:
            self._event = (sim.event, digest(sim.event.payload))
        return self._event[1]

    def step(self, sim: Simulation, g: int, x: int, act: Any, pre: Any, post: Any, emitted: tuple) -> None:
        if not self.full:
            return
        self._emit(
            {
                "type": "step",
                "tick": sim.now,
                "server": x,
                "group": g,
                "event": sim.event.kind,
                "payload-digest": self._event_digest(sim),
                "subaction": act.kind,
                "tag": classify(sim.protocol, act.kind),
                "action-digest": digest(act.args),
                "pre-digest": self._digest_state(g, x, pre),
                "post-digest": self._digest_state(g, x, post),
                "emitted": [digest(m) for m in emitted],
            }
        )

    def envelope(self, sim: Simulation, env: Any) -> None:
        if not self.full:
            return
        self._emit(
            {
                "type": "send",
                "tick": sim.now,
                "server": env.src,
                "dst": env.dst,
                "group": env.group,
                "kind": type(env.payload).__name__,
                "digest": digest(env.payload),
            }
        )

    def invoke(self, sim: Simulation, op: Op) -> None:
        self._emit({"type": "invoke", "tick": sim.now, "server": op.site, "op": op.id, "kind": op.kind, "key": op.key})

    def respond(self, sim: Simulation, op: Op) -> None:
        self._emit(
            {
                "type": "response",
                "tick": sim.now,
                "server": op.site,
                "op": op.id,
                "kind": op.kind,
                "key": op.key,
                "value": op.result,
                "local": op.local,
                "messages": op.messages,
            }
        )

    def commit(self, sim: Simulation, x: int, position: int, v: Command) -> None:
        self._emit(
            {"type": "commit", "tick": sim.now, "server": x, "position": position, "op": v.payload, "kind": v.op, "key": v.key}
        )

    def end(self, sim: Simulation) -> None:
        finals = {f"{g}/{x}": digest(s) for g, row in enumerate(sim.states) for x, s in enumerate(row)}
        self._emit(
            {
                "type": "end",
                "tick": sim.now,
                "steps": sim.step_count,
                "messages": sim.messages,
                "final": finals,
                "kv": [digest(kv) for kv in sim.kv],
            }
        )


def classify(protocol: str, kind: str) -> str:
    if protocol in LEASE_PROTOCOLS:
        return lp.classify(protocol, kind)
    if protocol in COORD_PROTOCOLS:
        return mc.classify(protocol, kind)
    return "base"


def header(cfg: SimConfig) -> dict:
    return {
        "type": "header",
        "format-version": FORMAT_VERSION,
        "protocol": cfg.protocol,
        "config-hash": cfg.config_hash(),
        "seed": cfg.seed,
        "flags": sorted(cfg.flags),
        "config": cfg.as_document(),
    }


# ------------------------------------------------------------------ metrics


def percentile(xs: Iterable[float], q: float) -> float | None:
    """Nearest-rank percentile; ``None`` for an empty sample."""
    xs = sorted(xs)
    if not xs:
        return None
    k = max(0, min(len(xs) - 1, int(-(-q * len(xs) // 100)) - 1))
    return xs[k]


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


@dataclass
class Metrics:
    ticks: int = 0
    issued: int = 0
    completed: int = 0
    latencies: list[int] = field(default_factory=list)
    read_latencies: list[int] = field(default_factory=list)
    write_latencies: list[int] = field(default_factory=list)
    op_messages: list[int] = field(default_factory=list)
    messages: int = 0
    proposals: dict[int, int] = field(default_factory=dict)
    commit_latency: list[int] = field(default_factory=list)
    commit_to_execute: list[int] = field(default_factory=list)
    propose_to_execute: list[int] = field(default_factory=list)
    lease_reads: int = 0
    fast_lease_reads: int = 0

    @classmethod
    def from_simulation(cls, sim: Simulation) -> "Metrics":
        m = cls(ticks=sim.now, messages=sim.messages)
        m.proposals = {x: 0 for x in range(sim.n)}
        for op in sim.ops.values():
            m.issued += 1
            if op.responded is None:
                continue
            m.completed += 1
            lat = op.responded - op.invoked
            m.latencies.append(lat)
            (m.read_latencies if op.kind == "read" else m.write_latencies).append(lat)
            m.op_messages.append(op.messages)
            if op.kind == "read" and op.lease_at_invoke:
                m.lease_reads += 1
                if op.local and op.messages == 0 and lat <= 1:
                    m.fast_lease_reads += 1
        for op_id in sim.effect_tick:
            who = sim.first_proposer.get(op_id)
            if who is not None:
                m.proposals[who] += 1
        for op_id, t in sim.own_commit.items():
            start = sim.proposal_tick.get(op_id)
            if start is not None:
                m.commit_latency.append(t - start)
            done = sim.exec_at_proposer.get(op_id)
            if done is not None:
                m.commit_to_execute.append(done - t)
        for op_id, done in sim.exec_at_proposer.items():
            start = sim.proposal_tick.get(op_id)
            if start is not None:
                m.propose_to_execute.append(done - start)
        return m

    @property
    def messages_per_op(self) -> float:
        return self.messages / self.completed if self.completed else 0.0

    def proposal_shares(self) -> dict[int, float]:
        total = sum(self.proposals.values())
        return {x: (c / total if total else 0.0) for x, c in self.proposals.items()}

    def summary(self) -> dict:
        seconds = self.ticks / 1000 if self.ticks else 0
        return {
            "issued": self.issued,
            "completed": self.completed,
            "p50": percentile(self.latencies, 50),
            "p90": percentile(self.latencies, 90),
            "p99": percentile(self.latencies, 99),
            "messages": self.messages,
            "messages-per-op": round(self.messages_per_op, 3),
            "ops-per-simulated-second": round(self.completed / seconds, 2) if seconds else 0.0,
            "proposal-shares": {str(k): round(v, 3) for k, v in self.proposal_shares().items()},
            "mean-commit-latency": _mean(self.commit_latency),
            "mean-commit-to-execute": _mean(self.commit_to_execute),
            "mean-propose-to-execute": _mean(self.propose_to_execute),
            "lease-reads": self.lease_reads,
            "fast-lease-reads": self.fast_lease_reads,
        }


# ---------------------------------------------------------------------- run


@dataclass
class RunResult:
    config: SimConfig
    metrics: Metrics
    sim: Simulation
    records: list[dict]

    @property
    def final_digests(self) -> dict:
        return self.records[-1]["final"] if self.records and self.records[-1]["type"] == "end" else {}


def run(
    cfg: SimConfig,
    trace_path: str | Path | None = None,
    *,
    keep_steps: bool = False,
    check_invariants: bool = False,
    full_trace: bool = True,
) -> RunResult:
    """Drive one seeded run to completion and optionally write its trace."""
    records: list[dict] = [_plain(header(cfg))]
    out = open(trace_path, "w", encoding="utf-8") if trace_path is not None else None

    def sink(rec: dict) -> None:
        records.append(rec)
        if out is not None:
            out.write(json.dumps(rec, sort_keys=True) + "\n")

    if out is not None:
        out.write(json.dumps(records[0], sort_keys=True) + "\n")
    recorder = TraceRecorder(sink, full=full_trace)
    sim = Simulation(cfg, keep_steps=keep_steps, check_invariants=check_invariants, recorder=recorder)
    try:
        sim.run()
        recorder.end(sim)
    except Exception as exc:
        if out is not None:
            out.write(json.dumps({"type": "abort", "seq": recorder.seq + 1, "error": repr(exc)}) + "\n")
        raise
    finally:
        if out is not None:
            out.close()
    return RunResult(cfg, Metrics.from_simulation(sim), sim, records)


# ------------------------------------------------------------------- replay


def load_trace(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise TruncatedTrace(len(records), f"line {lineno} is not valid JSON ({exc.msg})") from None
    return records


def config_from_header(records: list[dict], flags: Iterable[str] | None = None) -> SimConfig:
    """Validate a trace header and rebuild the configuration it was run with."""
    if not records or records[0].get("type") != "header":
        raise ReplayRefused("trace has no header line")
    head = records[0]
    if head.get("format-version") != FORMAT_VERSION:
        raise ReplayRefused(f"trace format version {head.get('format-version')} is not {FORMAT_VERSION}")
    cfg = SimConfig.model_validate(head["config"])
    if cfg.config_hash() != head.get("config-hash") or cfg.seed != head.get("seed"):
        raise ReplayRefused("trace header does not match its embedded configuration")
    if flags is not None and sorted(set(flags)) != head.get("flags"):
        raise ReplayRefused(
            f"trace was recorded with flags {head.get('flags')} but replay requested {sorted(set(flags))}"
        )
    return cfg


def check_continuity(records: list[dict]) -> None:
    body = records[1:]
    for k, rec in enumerate(body, 1):
        if rec.get("seq") != k:
            raise TruncatedTrace(k, f"expected seq {k}, found {rec.get('seq')}")
    if not body or body[-1].get("type") != "end":
        last = body[-1].get("seq", 0) if body else 0
        raise TruncatedTrace(last + 1, "trace ends without an end record")


@dataclass
class ReplayResult:
    config: SimConfig
    records: int
    final: dict
    sim: Simulation


def replay(path: str | Path, flags: Iterable[str] | None = None, *, keep_steps: bool = False, check_invariants: bool = False) -> ReplayResult:
    """Re-execute a trace and require every record, including final digests, to match."""
    records = load_trace(path)
    cfg = config_from_header(records, flags)
    check_continuity(records)
    return _reexecute(cfg, records, keep_steps=keep_steps, check_invariants=check_invariants)


def _reexecute(cfg: SimConfig, records: list[dict], **kw: Any) -> ReplayResult:
    it = iter(records[1:])

    def compare(rec: dict) -> None:
        want = next(it, None)
        if want is None:
            raise TruncatedTrace(rec["seq"], "re-execution produced more records than the trace holds")
        if want != rec:
            fields = sorted(k for k in set(want) | set(rec) if want.get(k) != rec.get(k))
            raise ReplayDivergence(rec["seq"], f"fields {fields} differ ({want.get('type')} record)")

    recorder = TraceRecorder(compare)
    sim = Simulation(cfg, recorder=recorder, **kw)
    sim.run()
    recorder.end(sim)
    extra = next(it, None)
    if extra is not None:
        raise ReplayDivergence(extra.get("seq", -1), "trace holds records the re-execution did not produce")
    return ReplayResult(cfg, len(records), records[-1]["final"], sim)


# ------------------------------------------------------------ consistency


@dataclass
class ConsistencyReport:
    reads: int = 0
    local_reads: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not self.violations


def read_consistency_check(records: Iterable[dict]) -> ConsistencyReport:
    """Every read returns the latest write whose effect could precede it.

    Writes on a key are ordered by their log position. A read that returned
    write ``w`` must respond no earlier than ``w`` took effect, and no later
    write may have taken effect before the read was invoked.
    """
    invoked: dict[str, int] = {}
    effect: dict[str, tuple[int, int]] = {}  # op -> (position, tick)
    writes: dict[str, list[tuple[int, int, str]]] = {}
    reads = []
    for rec in records:
        kind = rec.get("type")
        if kind == "invoke":
            invoked[rec["op"]] = rec["tick"]
        elif kind == "commit":
            if rec["op"] in effect:
                continue
            effect[rec["op"]] = (rec["position"], rec["tick"])
            if rec["kind"] == "write":
                writes.setdefault(rec["key"], []).append((rec["position"], rec["tick"], rec["op"]))
        elif kind == "response" and rec["kind"] == "read":
            reads.append(rec)
    for ws in writes.values():
        ws.sort()
    report = ConsistencyReport()
    for r in reads:
        report.reads += 1
        report.local_reads += bool(r.get("local"))
        inv, resp, v = invoked.get(r["op"], r["tick"]), r["tick"], r["value"]
        pos = -1
        if v is not None:
            if v not in effect:
                report.violations.append(f"read {r['op']} returned {v}, which never took effect")
                continue
            pos, t = effect[v]
            if t > resp:
                report.violations.append(f"read {r['op']} returned {v} before it took effect (tick {t} > {resp})")
        later = writes.get(r["key"], [])
        for p, t, w in later[bisect_right(later, (pos, float("inf"), "")):]:
            if t < inv:
                report.violations.append(
                    f"read {r['op']} of {r['key']} at tick {inv} missed write {w} that took effect at tick {t}"
                )
                break
    return report


# -------------------------------------------------------------------- check


@dataclass
class CheckReport:
    protocol: str
    verdicts: list[TraceVerdict] = field(default_factory=list)
    audits: list[AuditReport] = field(default_factory=list)
    invariant_violations: list[str] = field(default_factory=list)
    consistency: ConsistencyReport | None = None
    errors: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            not self.errors
            and all(v.passed for v in self.verdicts)
            and all(a.passed for a in self.audits)
            and not self.invariant_violations
            and (self.consistency is None or self.consistency.consistent)
        )

    def lines(self) -> list[str]:
        out = []
        for v in self.verdicts:
            status = "ok" if v.passed else "VIOLATION"
            out.append(f"map {v.map}: {status} ({v.steps} steps, {v.ok} ok, {v.stutter} stutter)")
            out += [f"  step {k}: {d}" for k, d in v.violations]
        for a in self.audits:
            out.append(f"audit {a.protocol}: {'ok' if a.passed else 'VIOLATION'}")
            out += [f"  {f}" for f in a.findings[:20]]
        out.append(f"invariants: {'ok' if not self.invariant_violations else 'VIOLATION'}")
        out += [f"  {v}" for v in self.invariant_violations[:20]]
        if self.consistency is not None:
            c = self.consistency
            out.append(f"read consistency: {'ok' if c.consistent else 'VIOLATION'} ({c.reads} reads, {c.local_reads} local)")
            out += [f"  {v}" for v in c.violations[:20]]
        out += [f"error: {e}" for e in self.errors]
        return out


def validate_maps(protocol: str, maps: Iterable[str]) -> list[str]:
    maps = list(maps)
    for name in maps:
        if name not in MAPS:
            raise UsageError(f"unknown map {name!r}; choose from {', '.join(sorted(MAPS))}")
        if concrete_protocol(name) != protocol:
            raise UsageError(f"map {name} checks {concrete_protocol(name)} traces, not {protocol}")
    return maps


def parent_maps(protocol: str) -> list[str]:
    return [name for name, (src, _dst) in MAPS.items() if src == protocol]


def state_machine_safety(sim: Simulation) -> list[str]:
    out = []
    for x in range(sim.n):
        for y in range(x + 1, sim.n):
            a, b = sim.applied[x], sim.applied[y]
            k = min(len(a), len(b))
            if a[:k] != b[:k]:
                first = next(i for i in range(k) if a[i] != b[i])
                out.append(f"servers {x} and {y} applied different entries at position {first}")
    return out


def check_simulation(sim: Simulation, records: list[dict], maps: Iterable[str], mutated_map: bool = False) -> CheckReport:
    """Refinement maps, non-mutation audit, invariants and read consistency for one run."""
    report = CheckReport(sim.protocol)
    qs = QuorumSystem.majority(sim.n)
    maps = list(maps)
    for name in maps:
        for g, steps in enumerate(sim.steps or []):
            v = verify_steps(name, qs, steps, mutated=mutated_map)
            if sim.groups > 1:
                v.map = f"{name} (group {g})"
            report.verdicts.append(v)
    if sim.protocol in LEASE_PROTOCOLS | COORD_PROTOCOLS:
        for steps in sim.steps or []:
            report.audits.append(audit_non_mutation(sim.protocol, steps))
    report.invariant_violations += [f"step {k}: {d}" for k, d in sim.violations]
    report.invariant_violations += state_machine_safety(sim)
    report.consistency = read_consistency_check(records)
    return report


def check(path: str | Path, maps: Iterable[str] = (), *, mutated_map: bool = False) -> CheckReport:
    """Re-execute a trace with full recording and run every checker over it."""
    records = load_trace(path)
    cfg = config_from_header(records)
    maps = validate_maps(cfg.protocol, maps)
    check_continuity(records)
    try:
        res = _reexecute(cfg, records, keep_steps=True, check_invariants=True)
    except ReplayDivergence as exc:
        report = CheckReport(cfg.protocol)
        report.errors.append(str(exc))
        return report
    return check_simulation(res.sim, records, maps, mutated_map)


def check_config(cfg: SimConfig, maps: Iterable[str] | None = None, *, mutated_map: bool = False) -> tuple[CheckReport, RunResult]:
    """Run and check in memory, without digesting every step."""
    maps = parent_maps(cfg.protocol) if maps is None else validate_maps(cfg.protocol, maps)
    res = run(cfg, keep_steps=True, check_invariants=True, full_trace=False)
    return check_simulation(res.sim, res.records, maps, mutated_map), res


def seeded_fault_config(protocol: str, seed: int, **workload: Any) -> SimConfig:
    """A small run with up to 10% drops and one partition, all derived from ``seed``."""
    rng = random.Random(f"faults/{protocol}/{seed}")
    n = 3
    at = rng.randrange(200, 2500)
    side = rng.sample(range(n), rng.choice((1, 2)))
    doc = {
        "protocol": protocol,
        "n": n,
        "seed": seed,
        "faults": {
            "drop-probability": round(rng.uniform(0.0, 0.10), 3),
            "partitions": [{"at": at, "heal": at + rng.randrange(300, 2500), "side": sorted(side)}],
        },
        "workload": {
            "clients-per-site": 1,
            "read-ratio": 0.5,
            "conflict-rate": 0.3,
            "ops-per-client": 6,
            "duration-ticks": 20000,
            **workload,
        },
    }
    return SimConfig.model_validate(doc)
