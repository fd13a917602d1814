#!/usr/bin/env python3
"""Node-access-latency experiment across injected delay tiers.

Runs the full federation + session pipeline in-process at each delay tier
and prints one latency table per tier (measured row + published reference
rows). Usage:

    python3 scripts/latency_tiers.py [--sessions 30] [--tiers 0,40,80]
"""
from __future__ import annotations

import argparse

from fedplane.harness import ScenarioSpec, render_report, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--sessions", type=int, default=30)
    parser.add_argument("--nodes", type=int, default=2)
    parser.add_argument("--tiers", default="0,40,80", help="delay tiers in ms")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    averages = []
    for tier in (float(t) for t in args.tiers.split(",")):
        report = run_scenario(
            ScenarioSpec(
                labs=1,
                testbeds=1,
                nodes=args.nodes,
                session_count=args.sessions,
                delay_ms=tier,
                seed=args.seed,
                time_mode="wall",
                parallelism=args.nodes,
            )
        )
        print(f"=== injected delay {tier:.0f} ms ===")
        print(render_report(report, "table"))
        averages.append((tier, report.average_s))

    print("tier -> average latency:")
    for tier, avg in averages:
        print(f"  {tier:6.0f} ms   {avg:.4f} s")
    monotone = all(a[1] <= b[1] for a, b in zip(averages, averages[1:]))
    print(f"monotone nondecreasing: {monotone}")
    return 0 if monotone else 1


if __name__ == "__main__":
    raise SystemExit(main())
