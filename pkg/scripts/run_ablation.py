"""Incremental task-augmentation curve in both group orders; writes one CSV.

    python scripts/run_ablation.py --config configs/desk.ini --out results/ablation.csv
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from collections import defaultdict

import numpy as np

from metainit.config import desk_config, load_config
from metainit.harness import AblationPlan, emit_plot_data, run_ablation


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/ablation.csv")
    ap.add_argument("--method", choices=("sp", "vtlp"), default="sp")
    ap.add_argument("--orders", nargs="+", default=["forward", "reverse"], choices=("forward", "reverse"))
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()

    cfg = desk_config() if args.config is None else load_config(args.config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    points = []
    for order in args.orders:
        plan = AblationPlan(
            order=order,
            seeds=cfg.plan.ablation_seeds,
            method=args.method,
            iterations=cfg.plan.ablation_iterations,
            config=cfg,
        )
        points.extend(run_ablation(plan, max_workers=args.workers))
    path = emit_plot_data(points, args.out)

    curve = defaultdict(list)
    for p in points:
        curve[(p.order, p.k)].append(p.test)
    print(f"{'order':8s} {'k':>3s} {'test FER %':>11s}")
    for (order, k), vals in sorted(curve.items()):
        print(f"{order:8s} {k:3d} {np.mean(vals):11.2f}")
    print(f"curve at {path}")
    return 1 if any(p.status != "ok" for p in points) else 0


if __name__ == "__main__":
    sys.exit(main())
