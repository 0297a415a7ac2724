"""Acceptance suite: one test and one pass/fail line per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the lines are collected in
the terminal summary. Running the file directly prints them as it goes.
"""

import functools
import tempfile
from pathlib import Path

from consensuslab import harness
from consensuslab.config import SimConfig
from consensuslab.explorer import ExploreConfig, explore

RESULTS: list[str] = []

ONE_WAY = 50
RTT = 2 * ONE_WAY  # rtt entries in a configuration are one-way delays


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def fault_free(protocol: str, seed: int, **workload) -> SimConfig:
    doc = {"protocol": protocol, "n": 3, "rtt": ONE_WAY, "seed": seed,
           "workload": {"clients-per-site": 1, "read-ratio": 0.5, "conflict-rate": 0.0,
                        "ops-per-client": 40, "duration-ticks": 60000, **workload}}
    return SimConfig.model_validate(doc)


@functools.lru_cache(maxsize=None)
def diamond_runs(protocol: str, runs: int = 1000) -> tuple[int, int, tuple[str, ...]]:
    """Check ``runs`` seeded faulty runs; returns (failed runs, incomplete runs, sample problems)."""
    failed, incomplete, problems = 0, 0, []
    for seed in range(runs):
        report, res = harness.check_config(harness.seeded_fault_config(protocol, seed))
        if not report.passed:
            failed += 1
            problems += [f"seed {seed}: {line}" for line in report.lines() if "VIOLATION" in line][:2]
        if res.metrics.completed != res.metrics.issued:
            incomplete += 1
    return failed, incomplete, tuple(problems[:5])


def test_criterion_01_multipaxos_exhaustive_safety():
    r = explore(ExploreConfig("multipaxos", n=3, values=2, max_round=2, max_index=1))
    needed = {"agreement", "one_value_per_ballot", "chosen_stability"}
    ok = r.ok and r.complete and needed <= set(r.checked) and r.seconds <= 600
    record(1, ok, f"multipaxos {r.states} states, {r.edges} edges, {r.seconds:.1f}s, "
                  f"{len(r.failures)} violations of {', '.join(sorted(r.checked))}")


def test_criterion_02_raftstar_exhaustive_safety():
    r = explore(ExploreConfig("raftstar", n=3, values=2, max_round=2, max_index=1))
    needed = {"log_matching", "leader_completeness", "log_ballot", "election_safety"}
    ok = r.ok and r.complete and needed <= set(r.checked)
    record(2, ok, f"raftstar {r.states} states, {r.edges} edges, {r.seconds:.1f}s, "
                  f"{len(r.failures)} violations of {', '.join(sorted(r.checked))}")


def test_criterion_03_raftstar_refines_paxos_on_every_edge():
    r = explore(ExploreConfig("raftstar", n=3, values=2, max_round=2, max_index=1), ["raftstar:paxos"])
    v = r.edge_verdicts["raftstar:paxos"]
    classified = v["ok"] + v["stutter"] + v["violation"]
    ok = r.complete and v["violation"] == 0 and classified == r.edges
    record(3, ok, f"{r.edges} edges: {v['ok']} ok, {v['stutter']} stutter, {v['violation']} violations, "
                  f"{classified / r.edges:.0%} classified")


def test_criterion_04_diamond_under_faults():
    out = {p: diamond_runs(p) for p in ("raftstar-pql", "raftstar-mencius")}
    ok = all(failed == 0 for failed, _i, _p in out.values())
    detail = "; ".join(f"{p}: 1000 runs, {f} failing, {i} incomplete" for p, (f, i, _s) in out.items())
    samples = [s for _f, _i, ss in out.values() for s in ss]
    record(4, ok, detail + (f" [{samples[0]}]" if samples else ""))


def test_criterion_05_lease_inv():
    failed, _incomplete, problems = diamond_runs("raftstar-pql")
    lease_problems = [p for p in problems if "lease" in p]
    reports = [
        explore(ExploreConfig("pql", values=1, max_round=0, max_index=0, max_grants=2, max_timer=3, lease_duration=2)),
        explore(ExploreConfig("raftstar-pql", values=1, max_round=1, max_index=0, max_grants=1,
                              max_timer=3, lease_duration=2)),
    ]
    ok = failed == 0 and not lease_problems and all(r.ok and r.complete and "lease_inv" in r.checked for r in reports)
    states = ", ".join(f"{r.protocol} {r.states} states" for r in reports)
    record(5, ok, f"runtime check held over 1000 raftstar-pql runs; exhaustive at max-timer 3, duration 2: {states}")


def test_criterion_06_skip_safety():
    reports = [
        explore(ExploreConfig(p, values=1, max_index=0, max_round=2, any_ballot=True))
        for p in ("coorpaxos", "raftstar-mencius")
    ]
    ok = all(r.ok and r.complete and "skip_safety" in r.checked for r in reports)
    record(6, ok, ", ".join(f"{r.protocol} {r.states} states {len(r.failures)} violations" for r in reports))


def test_criterion_07_local_read_cost():
    lease, fast = 0, 0
    for seed in range(5):
        m = harness.run(fault_free("raftstar-pql", seed)).metrics
        lease, fast = lease + m.lease_reads, fast + m.fast_lease_reads
    logged = [lat for seed in range(5) for lat in harness.run(fault_free("raftstar", seed)).metrics.read_latencies]
    share = fast / lease if lease else 0.0
    ok = lease > 0 and share >= 0.99 and bool(logged) and min(logged) >= RTT
    record(7, ok, f"raftstar-pql {fast}/{lease} lease reads local with 0 messages ({share:.1%}); "
                  f"raftstar logged reads min {min(logged)} ticks, RTT {RTT}")


def test_criterion_08_mencius_execute_latency():
    p2e, c2e = [], []
    for seed in range(5):
        m = harness.run(fault_free("raftstar-mencius", seed, **{"read-ratio": 0.0})).metrics
        p2e += m.propose_to_execute
        c2e += m.commit_to_execute
    mean_p2e = sum(p2e) / len(p2e) / RTT
    mean_c2e = sum(c2e) / len(c2e) / RTT
    ok = mean_p2e <= 1.75 and mean_c2e <= 1.75
    record(8, ok, f"mean propose-to-execute {mean_p2e:.2f} RTT, commit-to-execute {mean_c2e:.2f} RTT (bound 1.75)")


def test_criterion_09_load_balance():
    mencius = harness.run(fault_free("raftstar-mencius", 1)).metrics.proposal_shares()
    raft = harness.run(fault_free("raftstar", 1)).metrics.proposal_shares()
    ok = all(abs(s - 1 / 3) <= 0.05 for s in mencius.values()) and max(raft.values()) == 1.0
    shares = ", ".join(f"s{x} {s:.1%}" for x, s in mencius.items())
    record(9, ok, f"raftstar-mencius shares {shares}; raftstar leader {max(raft.values()):.0%}")


def _caught_by_explorer(protocol: str, flag: str, maps=(), **bounds) -> str | None:
    r = explore(ExploreConfig(protocol, flags=frozenset({flag}), **bounds), maps, stop_at_first=True)
    return r.failures[0].check if r.failures else None


def _caught_in_simulation(protocol: str, flag: str, seeds=range(10)) -> str | None:
    for seed in seeds:
        cfg = harness.seeded_fault_config(protocol, seed).model_copy(update={"flags": (flag,)})
        report, _res = harness.check_config(SimConfig.model_validate(cfg.as_document()))
        if not report.passed:
            return next(line for line in report.lines() if "VIOLATION" in line)
    return None


def test_criterion_10_seeded_bugs_are_caught():
    caught = {
        "skip_ballot_rewrite": _caught_by_explorer("raftstar", "skip_ballot_rewrite", max_round=5),
        "accept_shorter_log": _caught_by_explorer("raftstar", "accept_shorter_log"),
        "learn_with_f": _caught_by_explorer("raftstar", "learn_with_f", ["raftstar:paxos"], values=1, max_round=1),
        "skip_holder_wait": _caught_in_simulation("raftstar-pql", "skip_holder_wait"),
        "mark_nondefault_skip": _caught_by_explorer(
            "coorpaxos", "mark_nondefault_skip", values=1, max_index=0, max_round=2, any_ballot=True),
    }
    ok = all(caught.values())
    record(10, ok, "; ".join(f"{flag} -> {how or 'NOT CAUGHT'}" for flag, how in caught.items()))


def test_criterion_11_replay_is_deterministic():
    protocols = ("multipaxos", "raftstar", "pql", "raftstar-pql", "coorpaxos", "raftstar-mencius")
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(20):
            protocol = protocols[seed % len(protocols)]
            path = Path(tmp) / f"{seed}.jsonl"
            first = harness.run(harness.seeded_fault_config(protocol, 1000 + seed), path).final_digests
            again = harness.replay(path).final
            if not first or first != again:
                mismatched.append(seed)
    record(11, not mismatched, f"20 seeds across all protocols, {len(mismatched)} replays diverged")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion"):
            try:
                fn()
            except AssertionError:
                pass
