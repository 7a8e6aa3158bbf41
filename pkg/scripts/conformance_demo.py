#!/usr/bin/env python3
"""Per-stage validity checklist for several resolver backends.

Runs the full scenario suite against the oracle and two deliberately
degraded stubs, printing one checklist row per backend: a backend passes a
stage only if every suite episode completes that stage.

    python3 scripts/conformance_demo.py --seeds 3
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from anomaloop.config import SimConfig
from anomaloop.harness import run_conformance
from anomaloop.pipeline import (
    OracleResolver,
    Resolver,
    Stage,
    StageFailure,
    classify_scene,
)


class ClassifyOnly(Resolver):
    """Labels scenes correctly but cannot analyse or plan."""

    name = "classify-only"

    def run_stage(self, stage, ctx):
        if stage is Stage.SCENE:
            return classify_scene(ctx.obs).value
        raise StageFailure(stage, "stage not supported")


class NoFormatter(OracleResolver):
    """Reasons like the oracle but never produces parseable commands."""

    name = "no-formatter"

    def run_stage(self, stage, ctx):
        if stage is Stage.FORMATTING:
            return "I think the vehicles should probably move somewhere else."
        return super().run_stage(stage, ctx)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()

    cfg = SimConfig()
    stages = [s.value for s in Stage]
    print(f"{'resolver':<16}" + "".join(f"{s:<12}" for s in stages))
    for resolver in (OracleResolver(cfg), ClassifyOnly(), NoFormatter(cfg)):
        checklist = run_conformance(resolver, cfg, seeds=args.seeds)
        marks = "".join(f"{'✓' if checklist['stages'][s] else '✗':<12}" for s in stages)
        print(f"{checklist['resolver']:<16}{marks}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
