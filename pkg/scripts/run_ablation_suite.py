#!/usr/bin/env python3
"""Compare the full method against single-component ablations on one noise cell.

Every variant runs on the same seeded episode suite (episode seeds do not
depend on the ablation flags), so the comparison is paired.

Example:
    python scripts/run_ablation_suite.py --episodes 100 --ratio 0.3 --out results/ablation
"""

import argparse
import pathlib
import sys

from deta.adaptation import AdaptationConfig
from deta.harness import (
    ABLATION_PRESETS,
    AggregateReport,
    BenchmarkConfig,
    emit_report,
    run_benchmark,
)

VARIANTS = ("full", "no-cora", "no-local", "no-global", "no-ma", "off")


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise-type", choices=["label", "image"], default="label")
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="ablation_suite", help="output path prefix")
    return p.parse_args()


def main():
    args = parse_args()
    merged = None
    rows = []
    for name in VARIANTS:
        cfg = BenchmarkConfig(
            way=args.way,
            shot=args.shot,
            feature_dim=args.dim,
            noise_type=args.noise_type,
            noise_ratios=(args.ratio,),
            episodes_per_cell=args.episodes,
            ablation=ABLATION_PRESETS[name],
            adaptation=AdaptationConfig(iterations=args.iterations),
            master_seed=args.seed,
        )
        report = run_benchmark(cfg)
        cell = report.cells[0]
        rows.append((name, cell))
        if merged is None:
            merged = AggregateReport(
                master_seed=report.master_seed,
                ablation_mask="suite",
                cells=[],
                episodes=[],
            )
        merged.cells.extend(report.cells)
        merged.episodes.extend(report.episodes)

    prefix = pathlib.Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    emit_report(merged, "csv", prefix.with_suffix(".csv"))
    emit_report(merged, "json", prefix.with_suffix(".json"))

    baseline = rows[0][1].baseline_mean
    print(f"baseline (no adaptation): {baseline:.4f}")
    print(f"{'variant':>10} {'accuracy':>9} {'delta':>8} {'omega sep>0':>12}")
    for name, cell in rows:
        frac = (
            "n/a"
            if cell.omega_separation_positive_fraction is None
            else f"{cell.omega_separation_positive_fraction:.2f}"
        )
        print(f"{name:>10} {cell.deta_mean:>9.4f} {cell.deta_mean - baseline:>+8.4f} {frac:>12}")
    print(f"wrote {prefix.with_suffix('.csv')} and {prefix.with_suffix('.json')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
