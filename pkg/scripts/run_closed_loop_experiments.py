#!/usr/bin/env python3
"""Run the three staged-anomaly experiments with the oracle resolver.

For each scene kind this script resolves a batch of seeded episodes through
the full closed loop, verifies the no-intervention control stays broken, and
prints per-kind outcome and timing summaries.

    python3 scripts/run_closed_loop_experiments.py --seeds 20 --out out/experiments
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from anomaloop.commands import AnomalyLabel
from anomaloop.config import SimConfig
from anomaloop.harness import ResolverSpec, batch_specs, run_batch, write_batch_artifacts

KINDS = (AnomalyLabel.GHOST_JAM, AnomalyLabel.DEADLOCK, AnomalyLabel.ACCIDENT)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="out/experiments")
    args = parser.parse_args()

    cfg = SimConfig()
    specs = batch_specs(list(KINDS), list(range(args.seeds)))
    started = time.perf_counter()
    report, transcript = run_batch(specs, ResolverSpec(kind="oracle"), cfg, workers=args.workers)
    elapsed = time.perf_counter() - started
    write_batch_artifacts(args.out, report, transcript)

    print(f"{args.seeds} seeds per kind, {len(report['episodes'])} episodes in {elapsed:.1f}s\n")
    print(f"{'kind':<12}{'resolved':>9}{'ttc p50':>9}{'ttc max':>9}{'ctrl jammed':>13}{'saved s/veh':>13}")
    for kind in KINDS:
        eps = [e for e in report["episodes"] if e["spec"]["kind"] == kind.value]
        clear = sorted(e["metrics"]["time_to_clear"] for e in eps if e["metrics"]["time_to_clear"] is not None)
        resolved = sum(1 for e in eps if e["resolved"])
        jammed = sum(1 for e in eps if not e["control"]["resolved"])
        tracked = [max(len(e["tracked"]), 1) for e in eps]
        saved = [-e["metrics"]["travel_time_delta_s"] / n for e, n in zip(eps, tracked)]
        p50 = clear[len(clear) // 2] if clear else "-"
        mx = clear[-1] if clear else "-"
        print(
            f"{kind.value:<12}{resolved:>6}/{len(eps):<3}{p50!s:>8}{mx!s:>9}"
            f"{jammed:>8}/{len(eps):<4}{sum(saved)/len(saved):>12.2f}"
        )

    print("\ntiming (mean wall seconds per stage):")
    print(f"{'kind':<12}{'scene':>10}{'analysis':>10}{'solution':>10}{'formatting':>12}{'total':>10}")
    for row in report["timing"]:
        print(
            f"{row['kind']:<12}{row['scene_s']:>10.4f}{row['analysis_s']:>10.4f}"
            f"{row['solution_s']:>10.4f}{row['formatting_s']:>12.4f}{row['total_s']:>10.4f}"
        )
    print(f"\nartifacts written to {args.out}/")
    return 0 if report["all_resolved"] else 1


if __name__ == "__main__":
    sys.exit(main())
