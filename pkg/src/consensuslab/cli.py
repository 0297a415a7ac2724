"""Command line entry point ``lab``.

Exit status is 0 when everything checked out, 1 when a safety, refinement,
consistency or replay check failed, and 2 for usage errors (bad arguments,
unreadable configuration, or a trace that replay refuses to touch).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from . import harness
from .config import MUTATIONS, PROTOCOLS, load_config
from .explorer import ExploreConfig, explore
from .refinement import MAPS

OK, VIOLATION, USAGE = 0, 1, 2


def _usage(msg: str) -> click.UsageError:
    return click.UsageError(msg)


def _echo_json(doc: dict) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


flag_option = click.option(
    "--flag",
    "flags",
    multiple=True,
    type=click.Choice(sorted(MUTATIONS)),
    help="Enable a seeded protocol bug (repeatable).",
)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact", prog_name="lab")
def main() -> None:
    """Deterministic consensus lab: simulate, explore, check and replay."""


@main.command()
@click.option("-c", "--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the seed in the configuration.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None, help="Trace file (JSON lines).")
@click.option("--protocol", type=click.Choice(PROTOCOLS), default=None, help="Overrides the configured protocol.")
@flag_option
@click.option("--check/--no-check", default=True, help="Evaluate runtime invariants at every step.")
def run(config_path: str, seed: int | None, output: str | None, protocol: str | None, flags: tuple[str, ...], check: bool) -> None:
    """Run one seeded simulation and print its metrics."""
    overrides = {"seed": seed, "protocol": protocol, "flags": list(flags) if flags else None}
    try:
        cfg = load_config(config_path, **overrides)
    except (ValidationError, ValueError) as exc:
        raise _usage(f"invalid configuration: {exc}") from None
    res = harness.run(cfg, output, check_invariants=check)
    violations = res.sim.violations + [(None, d) for d in harness.state_machine_safety(res.sim)]
    doc = {"protocol": cfg.protocol, "seed": cfg.seed, "config-hash": cfg.config_hash(), **res.metrics.summary()}
    if output:
        doc["trace"] = output
    doc["invariant-violations"] = [d for _k, d in violations[:20]]
    _echo_json(doc)
    sys.exit(VIOLATION if violations else OK)


@main.command("explore")
@click.option("--protocol", type=click.Choice(PROTOCOLS), required=True)
@click.option("--n", "n", type=int, default=3, show_default=True)
@click.option("--values", type=int, default=2, show_default=True)
@click.option("--max-round", type=int, default=2, show_default=True, help="Largest ballot number.")
@click.option("--max-index", type=int, default=1, show_default=True)
@click.option("--max-timer", type=int, default=3, show_default=True)
@click.option("--lease-duration", type=int, default=2, show_default=True)
@click.option("--max-grants", type=int, default=3, show_default=True)
@click.option("--budget", type=int, default=5_000_000, show_default=True, help="State cap.")
@click.option("--any-ballot", is_flag=True, help="Let elections jump to any owned ballot.")
@click.option("--map", "maps", multiple=True, type=click.Choice(sorted(MAPS)), help="Check every edge under a map.")
@click.option("--stop-at-first", is_flag=True, help="Stop at the first violation.")
@flag_option
def explore_cmd(protocol: str, n: int, values: int, max_round: int, max_index: int, max_timer: int,
                lease_duration: int, max_grants: int, budget: int, any_ballot: bool, maps: tuple[str, ...],
                stop_at_first: bool, flags: tuple[str, ...]) -> None:
    """Enumerate every reachable state within bounds and check it."""
    try:
        cfg = ExploreConfig(
            protocol, n=n, values=values, max_round=max_round, max_index=max_index, max_timer=max_timer,
            lease_duration=lease_duration, max_grants=max_grants, budget=budget, any_ballot=any_ballot,
            flags=frozenset(flags),
        )
        harness.validate_maps(protocol, maps)
    except (ValueError, harness.UsageError) as exc:
        raise _usage(str(exc)) from None
    report = explore(cfg, maps, stop_at_first=stop_at_first)
    doc = report.summary()
    doc["failures"] = [
        {"check": f.check, "detail": f.detail, "witness": [f"{a.kind}@{a.server}" for a in f.witness]}
        for f in report.failures
    ]
    _echo_json(doc)
    sys.exit(OK if report.ok else VIOLATION)


@main.command("check")
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--map", "maps", multiple=True, help="Refinement map such as raftstar:paxos (repeatable).")
@click.option("--mutated-map", is_flag=True, help="Deliberately break the map to show the checker reacts.")
def check_cmd(trace: str, maps: tuple[str, ...], mutated_map: bool) -> None:
    """Re-execute a trace and run refinement, invariant and consistency checks."""
    try:
        if not maps:
            maps = tuple(harness.parent_maps(harness.config_from_header(harness.load_trace(trace)).protocol))
        report = harness.check(trace, maps, mutated_map=mutated_map)
    except harness.UsageError as exc:
        raise _usage(str(exc)) from None
    except harness.ReplayRefused as exc:
        raise _usage(f"cannot check {trace}: {exc}") from None
    except harness.TraceError as exc:
        click.echo(f"trace error: {exc}")
        sys.exit(VIOLATION)
    for line in report.lines():
        click.echo(line)
    sys.exit(OK if report.passed else VIOLATION)


@main.command("replay")
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@flag_option
def replay_cmd(trace: str, flags: tuple[str, ...]) -> None:
    """Re-execute a trace and require an identical record stream and final state."""
    try:
        res = harness.replay(trace, flags if flags else None)
    except harness.ReplayRefused as exc:
        raise _usage(f"replay refused: {exc}") from None
    except harness.TraceError as exc:
        click.echo(str(exc))
        sys.exit(VIOLATION)
    click.echo(f"replayed {res.records} records of {Path(trace).name}: identical")
    for key, d in sorted(res.final.items()):
        click.echo(f"  final {key} {d}")
    sys.exit(OK)


if __name__ == "__main__":  # pragma: no cover
    main()
