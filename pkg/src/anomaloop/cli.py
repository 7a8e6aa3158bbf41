"""Command-line entry point: run, batch, conformance, validate-plan.

Exit codes: 0 resolved/ok, 1 unresolved/invalid, 2 config errors,
3 resolver transport exhaustion.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .commands import AnomalyLabel, PlanParseError, PlanValidationError, parse as parse_plan, validate as validate_plan
from .config import ConfigError, SimConfig, parse_kv_file
from .harness import (
    ResolverSpec,
    batch_specs,
    format_conformance,
    run_batch,
    run_conformance,
    run_episode,
    write_batch_artifacts,
    write_episode_artifacts,
)
from .observation import observe
from .scenarios import InvalidParams, ScenarioSpec, build, load_spec, warm_up

EXIT_OK = 0
EXIT_UNRESOLVED = 1
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anomaloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--resolver", choices=("oracle", "remote"), default="oracle")
        p.add_argument("--endpoint", default="", help="remote resolver base URL")
        p.add_argument("--model", default="", help="remote resolver model name")
        p.add_argument("--config", default="", help="flat key=value config file")
        p.add_argument("--out", default="out", help="output directory")

    p_run = sub.add_parser("run", help="run one closed-loop episode")
    p_run.add_argument("--scenario", required=True, help="scenario file")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common(p_run)

    p_batch = sub.add_parser("batch", help="run a kinds x seeds suite")
    p_batch.add_argument("--kinds", default="ghost_jam,deadlock,accident", help="comma-separated scene kinds")
    p_batch.add_argument("--seeds", type=int, default=20, help="seeds 0..N-1 per kind")
    p_batch.add_argument("--repetitions", type=int, default=1)
    p_batch.add_argument("--workers", type=int, default=1)
    common(p_batch)

    p_conf = sub.add_parser("conformance", help="per-stage validity checklist for a resolver")
    p_conf.add_argument("--seeds", type=int, default=3)
    common(p_conf)

    p_val = sub.add_parser("validate-plan", help="parse and validate a plan file against a scenario")
    p_val.add_argument("--plan", required=True)
    p_val.add_argument("--scenario", required=True)
    p_val.add_argument("--config", default="")
    return parser


def _load_cfg(path: str) -> SimConfig:
    if not path:
        return SimConfig()
    return SimConfig.from_mapping(parse_kv_file(path))


def _resolver_spec(args, entries: dict | None = None) -> ResolverSpec:
    endpoint = args.endpoint
    model = args.model
    if entries:
        endpoint = endpoint or entries.get("endpoint", ("", 0))[0]
        model = model or entries.get("model", ("", 0))[0]
    return ResolverSpec(kind=args.resolver, endpoint=endpoint, model=model)


def _transport_errors():
    from .remote import AuthError, BudgetExceeded, TransportError

    return AuthError, BudgetExceeded, TransportError


def cmd_run(args) -> int:
    try:
        cfg = _load_cfg(args.config)
        entries = parse_kv_file(args.config) if args.config else {}
        spec = load_spec(args.scenario)
        if args.seed is not None:
            spec = ScenarioSpec(
                kind=spec.kind, seed=args.seed, params=spec.params,
                tick_budget=spec.tick_budget, resolve_budget=spec.resolve_budget,
            )
        resolver_spec = _resolver_spec(args, entries)
        resolver_spec.create(cfg)  # fail fast on bad resolver config
    except (ConfigError, InvalidParams, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    AuthError, BudgetExceeded, TransportError = _transport_errors()
    try:
        ep, metrics, report, transcript = run_episode(spec, resolver_spec, cfg)
    except AuthError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExceeded, TransportError) as err:
        print(f"transport error: {err}", file=sys.stderr)
        return EXIT_TRANSPORT
    except InvalidParams as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    write_episode_artifacts(args.out, report, transcript)
    ttc = metrics.time_to_clear if metrics.time_to_clear is not None else "inf"
    print(f"{spec.kind.value} seed={spec.seed} resolved={ep.resolved} time_to_clear={ttc}")
    return EXIT_OK if ep.resolved else EXIT_UNRESOLVED


def cmd_batch(args) -> int:
    try:
        cfg = _load_cfg(args.config)
        entries = parse_kv_file(args.config) if args.config else {}
        kinds = []
        for token in args.kinds.split(","):
            token = token.strip().lower()
            if not token:
                continue
            try:
                kinds.append(AnomalyLabel(token))
            except ValueError:
                raise ConfigError(f"unknown kind {token!r}", field="kinds") from None
        specs = batch_specs(kinds, list(range(args.seeds)), args.repetitions)
        resolver_spec = _resolver_spec(args, entries)
        resolver_spec.create(cfg)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    AuthError, BudgetExceeded, TransportError = _transport_errors()
    try:
        batch_report, transcript = run_batch(specs, resolver_spec, cfg, workers=args.workers)
    except AuthError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExceeded, TransportError) as err:
        print(f"transport error: {err}", file=sys.stderr)
        return EXIT_TRANSPORT
    write_batch_artifacts(args.out, batch_report, transcript)
    rows = batch_report["timing"]
    print(f"{'kind':<12}{'scene_s':>10}{'analysis_s':>12}{'solution_s':>12}{'formatting_s':>14}{'total_s':>10}")
    for row in rows:
        print(
            f"{row['kind']:<12}{row['scene_s']:>10.4f}{row['analysis_s']:>12.4f}"
            f"{row['solution_s']:>12.4f}{row['formatting_s']:>14.4f}{row['total_s']:>10.4f}"
        )
    resolved = sum(1 for r in batch_report["episodes"] if r["resolved"])
    print(f"episodes resolved: {resolved}/{len(batch_report['episodes'])}")
    return EXIT_OK if batch_report["all_resolved"] else EXIT_UNRESOLVED


def cmd_conformance(args) -> int:
    try:
        cfg = _load_cfg(args.config)
        entries = parse_kv_file(args.config) if args.config else {}
        resolver = _resolver_spec(args, entries).create(cfg)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    AuthError, BudgetExceeded, TransportError = _transport_errors()
    try:
        checklist = run_conformance(resolver, cfg, seeds=args.seeds)
    except AuthError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExceeded, TransportError) as err:
        print(f"transport error: {err}", file=sys.stderr)
        return EXIT_TRANSPORT
    print(format_conformance(checklist))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "conformance.json").write_text(json.dumps(checklist, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if all(checklist["stages"].values()) else EXIT_UNRESOLVED


def cmd_validate_plan(args) -> int:
    try:
        cfg = _load_cfg(args.config)
        spec = load_spec(args.scenario)
        plan_text = Path(args.plan).read_text()
    except (ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    world, _ = build(spec, cfg)
    world = warm_up(world, cfg)
    obs = observe(world)
    try:
        plan = parse_plan(plan_text)
        validate_plan(plan, obs)
    except (PlanParseError, PlanValidationError) as err:
        print(f"invalid: {err}")
        return EXIT_UNRESOLVED
    print(f"ok: {len(plan.commands)} commands, {len(plan.faults)} fault assignments")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "run": cmd_run,
        "batch": cmd_batch,
        "conformance": cmd_conformance,
        "validate-plan": cmd_validate_plan,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
