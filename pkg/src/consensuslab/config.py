"""Run configuration: protocol, cluster, network, faults, workload and knobs.

A configuration file is a JSON document with nested sections. Keys are
written in kebab case (``lease-duration-ticks``); snake case is accepted too.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import digest
from .simnet import FaultSchedule, PartitionEvent, default_rtt, uniform_rtt

PROTOCOLS = ("multipaxos", "raftstar", "pql", "raftstar-pql", "coorpaxos", "raftstar-mencius")
Protocol = Literal["multipaxos", "raftstar", "pql", "raftstar-pql", "coorpaxos", "raftstar-mencius"]

# Seeded protocol bugs; each one breaks a specific safety argument.
MUTATIONS = frozenset(
    {
        "skip_ballot_rewrite",
        "accept_shorter_log",
        "learn_with_f",
        "mark_nondefault_skip",
        "skip_holder_wait",
        "grant_bumps_ballot",
        "skip_commit_guard",
        "skip_prev_term_check",
    }
)


def _kebab(name: str) -> str:
    return name.replace("_", "-")


class Section(BaseModel):
    model_config = ConfigDict(alias_generator=_kebab, populate_by_name=True, extra="forbid", frozen=True)


class WorkloadSpec(Section):
    clients_per_site: int = Field(1, ge=0)
    read_ratio: float = Field(0.5, ge=0.0, le=1.0)
    conflict_rate: float = Field(0.0, ge=0.0, le=1.0)
    popular_key: str = "hot"
    key_space: int = Field(8, ge=1)
    request_size: str = "small"
    duration_ticks: int = Field(5000, ge=0)
    ops_per_client: int | None = Field(None, ge=0)
    think_ticks: int = Field(0, ge=0)
    sites: tuple[int, ...] | None = None  # sites hosting clients; all by default


class PartitionSpec(Section):
    at: int = Field(ge=0)
    heal: int
    side: tuple[int, ...]  # one side of the cut; the rest of the cluster is the other

    @model_validator(mode="after")
    def _order(self) -> "PartitionSpec":
        if self.heal <= self.at:
            raise ValueError("a partition must heal after it starts")
        return self


class FaultSpec(Section):
    drop_probability: float = Field(0.0, ge=0.0, le=1.0)
    duplicate_probability: float = Field(0.0, ge=0.0, le=1.0)
    partitions: tuple[PartitionSpec, ...] = ()


class LeaseSpec(Section):
    lease_duration_ticks: int = Field(2000, ge=1)
    renew_interval_ticks: int = Field(500, ge=1)
    holders: tuple[int, ...] | None = None  # every server by default


class MenciusSpec(Section):
    suspicion_timeout_ticks: int = Field(0, ge=0)  # 0 disables owner recovery
    skip_piggyback: bool = True

    @field_validator("skip_piggyback", mode="before")
    @classmethod
    def _on_off(cls, v: Any) -> Any:
        if isinstance(v, str) and v.lower() in ("on", "off"):
            return v.lower() == "on"
        return v


class TimingSpec(Section):
    heartbeat_ticks: int = Field(100, ge=1)
    election_timeout_ticks: int = Field(1000, ge=1)
    retry_ticks: int = Field(2500, ge=1)
    settle_ticks: int | None = Field(None, ge=0)
    max_ticks: int | None = Field(None, ge=1)


class SimConfig(Section):
    protocol: Protocol = "raftstar"
    n: int = Field(3, ge=1, le=9)
    rtt: tuple[tuple[int, ...], ...] | int | None = None  # one-way delays; int means uniform
    seed: int = 0
    flags: tuple[str, ...] = ()
    workload: WorkloadSpec = WorkloadSpec()
    faults: FaultSpec = FaultSpec()
    lease: LeaseSpec = LeaseSpec()
    mencius: MenciusSpec = MenciusSpec()
    timing: TimingSpec = TimingSpec()

    @model_validator(mode="after")
    def _consistent(self) -> "SimConfig":
        n = self.n
        if isinstance(self.rtt, tuple):
            if len(self.rtt) != n or any(len(r) != n for r in self.rtt):
                raise ValueError(f"rtt matrix must be {n} x {n}")
            if any(d < 0 for r in self.rtt for d in r):
                raise ValueError("rtt entries must be non-negative")
        elif isinstance(self.rtt, int):
            if self.rtt < 0:
                raise ValueError("rtt must be non-negative")
        elif n > 5:
            raise ValueError("the default rtt matrix covers five sites; give an rtt for larger clusters")
        unknown = set(self.flags) - MUTATIONS
        if unknown:
            raise ValueError(f"unknown flags {sorted(unknown)}; known: {sorted(MUTATIONS)}")
        for p in self.faults.partitions:
            if not p.side or any(not 0 <= x < n for x in p.side) or len(set(p.side)) >= n:
                raise ValueError("partition side must be a non-empty proper subset of the servers")
        for xs in (self.workload.sites, self.lease.holders):
            if xs is not None and any(not 0 <= x < n for x in xs):
                raise ValueError("site and holder ids must name servers")
        return self

    # derived pieces

    def rtt_matrix(self) -> tuple[tuple[int, ...], ...]:
        if self.rtt is None:
            return default_rtt(self.n)
        if isinstance(self.rtt, int):
            return uniform_rtt(self.n, self.rtt)
        return self.rtt

    def fault_schedule(self) -> FaultSchedule:
        everyone = frozenset(range(self.n))
        parts = tuple(
            PartitionEvent(p.at, (frozenset(p.side), everyone - frozenset(p.side)), p.heal)
            for p in self.faults.partitions
        )
        return FaultSchedule(
            drop_probability=self.faults.drop_probability,
            duplicate_probability=self.faults.duplicate_probability,
            partitions=parts,
        )

    def as_document(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def config_hash(self) -> str:
        """Hash of everything except the seed."""
        doc = self.as_document()
        doc.pop("seed", None)
        return digest(json.dumps(doc, sort_keys=True))


def load_config(path: str | Path, **overrides: Any) -> SimConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig.model_validate(doc)
