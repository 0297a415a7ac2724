"""Seeded discrete-event network with drops, duplicates and partitions.

One tick is one simulated millisecond. The queue holds envelopes and local
timers; ties between events due at the same tick are broken by a draw from
the seeded generator made when the event is scheduled, so a run is fully
determined by the seed and the sequence of calls.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Iterable

from .core import BROADCAST, Envelope

# One-way delivery delays between five sites; the extremes are 25 and 292.
DEFAULT_RTT = (
    (0, 25, 70, 80, 160),
    (25, 0, 55, 90, 150),
    (70, 55, 0, 130, 100),
    (80, 90, 130, 0, 292),
    (160, 150, 100, 292, 0),
)


def default_rtt(n: int) -> tuple[tuple[int, ...], ...]:
    if n > len(DEFAULT_RTT):
        raise ValueError(f"default matrix covers at most {len(DEFAULT_RTT)} servers")
    return tuple(row[:n] for row in DEFAULT_RTT[:n])


def uniform_rtt(n: int, delay: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(0 if a == b else delay for b in range(n)) for a in range(n))


@dataclass(frozen=True)
class PartitionEvent:
    at: int
    cut: tuple[frozenset[int], frozenset[int]]
    heal: int

    def __post_init__(self) -> None:
        if self.heal <= self.at:
            raise ValueError("a partition must heal after it starts")
        a, b = self.cut
        if a & b:
            raise ValueError("partition sides overlap")


@dataclass(frozen=True)
class FaultSchedule:
    drop_probability: float = 0.0
    link_drop: tuple[tuple[int, int, float], ...] = ()
    duplicate_probability: float = 0.0
    max_duplicates: int = 1
    partitions: tuple[PartitionEvent, ...] = ()

    def __post_init__(self) -> None:
        probs = [self.drop_probability, self.duplicate_probability, *(p for *_, p in self.link_drop)]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.max_duplicates < 0:
            raise ValueError("max_duplicates must be non-negative")

    def drop_for(self, src: int, dst: int) -> float:
        for a, b, p in self.link_drop:
            if a == src and b == dst:
                return p
        return self.drop_probability


@dataclass(frozen=True)
class Timer:
    server: int
    kind: str
    data: Any = None


@dataclass(frozen=True)
class Quiescent:
    pass


QUIESCENT = Quiescent()


@dataclass(order=True)
class _Slot:
    at: int
    tie: float
    seq: int
    item: Any = field(compare=False)


def crosses(cut: tuple[frozenset[int], frozenset[int]], src: int, dst: int) -> bool:
    a, b = cut
    return (src in a and dst in b) or (src in b and dst in a)


class SimNet:
    """In-flight envelopes and timers ordered by delivery tick."""

    def __init__(
        self,
        n: int,
        rtt: Iterable[Iterable[int]] | None = None,
        faults: FaultSchedule | None = None,
        seed: int = 0,
    ) -> None:
        self.n = n
        self.rtt = tuple(tuple(r) for r in (rtt if rtt is not None else default_rtt(n)))
        if len(self.rtt) != n or any(len(r) != n for r in self.rtt):
            raise ValueError("rtt matrix must be n x n")
        self.faults = faults or FaultSchedule()
        self.rng = random.Random(seed)
        self.clock = 0
        self.delivered: list[Envelope] = []
        self.cuts: list[tuple[frozenset[int], frozenset[int]]] = []
        self.held: list[tuple[int, Envelope]] = []  # (residual delay, envelope)
        self.sent = 0
        self.dropped = 0
        self._queue: list[_Slot] = []
        self._seq = 0
        for p in self.faults.partitions:
            self._push(p.at, ("partition", p.cut))
            self._push(p.heal, ("heal", p.cut))

    # ------------------------------------------------------------ queueing

    def _push(self, at: int, item: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, _Slot(at, self.rng.random(), self._seq, item))

    def in_flight(self) -> list[tuple[int, Envelope]]:
        return sorted(
            ((s.at, s.item) for s in self._queue if isinstance(s.item, Envelope)),
            key=lambda x: x[0],
        )

    def pending_envelopes(self) -> int:
        return sum(isinstance(s.item, Envelope) for s in self._queue) + len(self.held)

    def _blocked(self, src: int, dst: int) -> bool:
        return any(crosses(c, src, dst) for c in self.cuts)

    def send(self, e: Envelope) -> list[Envelope]:
        """Schedule ``e``; broadcasts fan out to every other server.

        Returns the point-to-point copies that were put on the wire (before
        drop decisions), so callers can count messages.
        """
        if not 0 <= e.src < self.n:
            raise ValueError(f"sender {e.src} is not in the cluster")
        if e.dst == BROADCAST:
            copies = [
                Envelope(e.src, d, self.clock, e.payload, e.group) for d in range(self.n) if d != e.src
            ]
        else:
            if not 0 <= e.dst < self.n:
                raise ValueError(f"destination {e.dst} is not in the cluster")
            copies = [Envelope(e.src, e.dst, self.clock, e.payload, e.group)]
        for c in copies:
            self.sent += 1
            if self.rng.random() < self.faults.drop_for(c.src, c.dst):
                self.dropped += 1
                continue
            delay = self.rtt[c.src][c.dst]
            self._enqueue(c, delay)
            extra = 0
            while extra < self.faults.max_duplicates and self.rng.random() < self.faults.duplicate_probability:
                extra += 1
                self._enqueue(c, delay + self.rng.randint(0, max(1, delay)))
        return copies

    def _enqueue(self, e: Envelope, delay: int) -> None:
        if self._blocked(e.src, e.dst):
            self.held.append((delay, e))
        else:
            self._push(self.clock + delay, e)

    def set_timer(self, at: int, timer: Timer) -> None:
        if at < self.clock:
            raise ValueError("cannot schedule a timer in the past")
        self._push(at, timer)

    # ---------------------------------------------------------- partitions

    def partition(self, cut: tuple[Iterable[int], Iterable[int]]) -> None:
        a, b = frozenset(cut[0]), frozenset(cut[1])
        if a & b:
            raise ValueError("partition sides overlap")
        cut = (a, b)
        self.cuts.append(cut)
        keep: list[_Slot] = []
        for s in self._queue:
            if isinstance(s.item, Envelope) and crosses(cut, s.item.src, s.item.dst):
                self.held.append((max(0, s.at - self.clock), s.item))
            else:
                keep.append(s)
        heapq.heapify(keep)
        self._queue = keep

    def heal(self, cut: tuple[Iterable[int], Iterable[int]]) -> None:
        cut = (frozenset(cut[0]), frozenset(cut[1]))
        if cut in self.cuts:
            self.cuts.remove(cut)
        still: list[tuple[int, Envelope]] = []
        for residual, e in self.held:
            if self._blocked(e.src, e.dst):
                still.append((residual, e))
            else:
                self._push(self.clock + residual, e)
        self.held = still

    # ------------------------------------------------------------- stepping

    def next_event(self) -> Envelope | Timer | Quiescent:
        """Pop the earliest envelope or timer, advancing the clock to it."""
        while self._queue:
            s = heapq.heappop(self._queue)
            self.clock = max(self.clock, s.at)
            item = s.item
            if isinstance(item, tuple):
                kind, cut = item
                self.partition(cut) if kind == "partition" else self.heal(cut)
                continue
            if isinstance(item, Envelope):
                if self._blocked(item.src, item.dst):
                    self.held.append((0, item))
                    continue
                self.delivered.append(item)
            return item
        return QUIESCENT

    def peek_time(self) -> int | None:
        return self._queue[0].at if self._queue else None
