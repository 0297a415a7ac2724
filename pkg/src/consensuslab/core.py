"""Shared vocabulary: ballots, values, log entries, quorum systems and envelopes."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, fields, is_dataclass
from enum import Enum
from typing import Any, Iterable, NamedTuple

# Sentinel for lastIndex / logTail / commitIndex / applyIndex before the log.
NO_INDEX = -1
# Ballot held by a server that has not seen any ballot yet.
NO_BALLOT = -1


# ---------------------------------------------------------------- ballots


@dataclass(frozen=True, order=True)
class Ballot:
    """A (round, proposer) pair; ``encode`` gives the natural-number form."""

    round: int
    proposer: int

    def encode(self, n: int) -> int:
        if self.round < 0 or not 0 <= self.proposer < n:
            raise ValueError(f"invalid ballot {self} for cluster size {n}")
        return self.round * n + self.proposer

    @classmethod
    def decode(cls, b: int, n: int) -> "Ballot":
        if b < 0:
            raise ValueError("the empty ballot has no round or proposer")
        return cls(b // n, b % n)


def proposer_of(b: int, n: int) -> int:
    return b % n if b >= 0 else NO_INDEX


def round_of(b: int, n: int) -> int:
    return b // n if b >= 0 else NO_INDEX


def ballot_succ(b: int, proposer: int, n: int) -> int:
    """Ballot of ``proposer`` in the round after ``b``'s round.

    Always strictly greater than ``b``; from the empty ballot it yields the
    proposer's round-0 ballot.
    """
    if not 0 <= proposer < n:
        raise ValueError(f"proposer {proposer} outside cluster of {n}")
    return (round_of(b, n) + 1) * n + proposer


# ----------------------------------------------------------------- values


class _Marker(Enum):
    NOVAL = "noval"
    NOOP = "noop"

    def __repr__(self) -> str:
        return self.name


NOVAL = _Marker.NOVAL
NOOP = _Marker.NOOP


@dataclass(frozen=True, order=True)
class Command:
    op: str
    key: str
    payload: str = ""

    def __post_init__(self) -> None:
        if self.op not in ("read", "write"):
            raise ValueError(f"unknown op kind {self.op!r}")

    @property
    def is_read(self) -> bool:
        return self.op == "read"


Value = Command | _Marker


def value_bytes(v: Value) -> bytes:
    """Canonical byte form used to break ties between equal ballots."""
    if v is NOVAL:
        return b"\x00"
    if v is NOOP:
        return b"\x01"
    return b"\x02" + f"{v.op}\x1f{v.key}\x1f{v.payload}".encode()


def is_command(v: Value) -> bool:
    return isinstance(v, Command)


def touches_key(v: Value, key: str) -> bool:
    return isinstance(v, Command) and v.op == "write" and v.key == key


# ---------------------------------------------------------------- entries


class Entry(NamedTuple):
    """One log slot. ``bal`` is the Paxos-visible ballot, ``term`` the Raft term."""

    bal: int
    term: int
    val: Value


EMPTY = Entry(NO_BALLOT, NO_BALLOT, NOVAL)


def entry_key(e: Entry, n: int) -> tuple:
    return (e.bal, proposer_of(e.bal, n), value_bytes(e.val))


def compare_entries(a: Entry, b: Entry, n: int) -> int:
    """Three-way comparison: by ballot, then its proposer, then value bytes."""
    ka, kb = entry_key(a, n), entry_key(b, n)
    return (ka > kb) - (ka < kb)


def highest_entry(entries: Iterable[Entry], n: int) -> Entry:
    best = EMPTY
    best_key = entry_key(best, n)
    for e in entries:
        k = entry_key(e, n)
        if k > best_key:
            best, best_key = e, k
    return best


def slot(seq: tuple, i: int, default: Any = EMPTY) -> Any:
    return seq[i] if 0 <= i < len(seq) else default


def put(seq: tuple, i: int, x: Any, default: Any = EMPTY) -> tuple:
    """Return ``seq`` with position ``i`` set, padding with ``default``."""
    if i < len(seq):
        return seq[:i] + (x,) + seq[i + 1:]
    return seq + (default,) * (i - len(seq)) + (x,)


# ---------------------------------------------------------------- quorums


class UnknownServer(ValueError):
    pass


@dataclass(frozen=True)
class QuorumSystem:
    servers: frozenset[int]
    quorums: frozenset[frozenset[int]]
    f: int

    def __post_init__(self) -> None:
        for q in self.quorums:
            if not q <= self.servers:
                raise ValueError(f"quorum {sorted(q)} is not a subset of the servers")
        for q1, q2 in itertools.combinations(self.quorums, 2):
            if not q1 & q2:
                raise ValueError("quorums must pairwise intersect")

    @classmethod
    def majority(cls, n: int) -> "QuorumSystem":
        servers = frozenset(range(n))
        size = n // 2 + 1
        quorums = frozenset(
            frozenset(c) for k in range(size, n + 1) for c in itertools.combinations(range(n), k)
        )
        return cls(servers, quorums, (n - 1) // 2)

    @property
    def n(self) -> int:
        return len(self.servers)

    def is_quorum(self, s: Iterable[int]) -> bool:
        s = frozenset(s)
        unknown = s - self.servers
        if unknown:
            raise UnknownServer(f"unknown server ids {sorted(unknown)}")
        return s in self.quorums

    def contains_quorum(self, s: Iterable[int]) -> bool:
        s = frozenset(s) & self.servers
        return any(q <= s for q in self.quorums)

    @property
    def minimal_quorums(self) -> list[frozenset[int]]:
        return [q for q in self.quorums if not any(p < q for p in self.quorums)]


# -------------------------------------------------------------- envelopes

BROADCAST = -1


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    sent_at: int
    payload: Any
    group: int = 0


class Action(NamedTuple):
    """One replica-level step: what ran, where, and with which inputs."""

    kind: str
    server: int
    args: tuple = ()


# ---------------------------------------------------------- serialization


def to_plain(obj: Any) -> Any:
    """Turn protocol data into JSON-compatible structures, deterministically."""
    if obj is None or isinstance(obj, (bool, int, str, float)):
        return obj
    if isinstance(obj, _Marker):
        return {"$": obj.value}
    if isinstance(obj, Command):
        return {"$": "cmd", "op": obj.op, "key": obj.key, "payload": obj.payload}
    if isinstance(obj, Entry):
        return [obj.bal, obj.term, to_plain(obj.val)]
    if is_dataclass(obj) and not isinstance(obj, type):
        out = {"$": type(obj).__name__}
        for f in fields(obj):
            out[f.name] = to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, dict):
        return {"$map": sorted(([to_plain(k), to_plain(v)] for k, v in obj.items()), key=_sort_key)}
    if isinstance(obj, (frozenset, set)):
        return {"$set": sorted((to_plain(x) for x in obj), key=_sort_key)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(x) for x in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _sort_key(x: Any) -> str:
    return json.dumps(x, sort_keys=True, separators=(",", ":"))


def canonical_bytes(obj: Any) -> bytes:
    return json.dumps(to_plain(obj), sort_keys=True, separators=(",", ":")).encode()


def digest(obj: Any) -> str:
    return hashlib.blake2b(canonical_bytes(obj), digest_size=12).hexdigest()


__all__ = [
    "Action",
    "BROADCAST",
    "Ballot",
    "Command",
    "EMPTY",
    "Entry",
    "Envelope",
    "NOOP",
    "NOVAL",
    "NO_BALLOT",
    "NO_INDEX",
    "QuorumSystem",
    "UnknownServer",
    "Value",
    "ballot_succ",
    "canonical_bytes",
    "compare_entries",
    "digest",
    "highest_entry",
    "is_command",
    "proposer_of",
    "put",
    "round_of",
    "slot",
    "to_plain",
    "touches_key",
    "value_bytes",
]
