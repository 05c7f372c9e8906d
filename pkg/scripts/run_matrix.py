"""Every condition x seed on the configured world; writes a CSV report.

    python scripts/run_matrix.py --config configs/desk.ini --out results/matrix.csv
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
import time

from metainit.config import desk_config, load_config
from metainit.harness import ExperimentPlan, emit_plot_data, run_matrix


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/matrix.csv")
    ap.add_argument("--seeds", type=int, nargs="+", help="override [plan] seeds")
    ap.add_argument("--workers", type=int, help="process count (default: MI_THREADS or 1)")
    args = ap.parse_args()

    cfg = desk_config() if args.config is None else load_config(args.config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plan = ExperimentPlan.from_config(cfg)
    if args.seeds:
        plan = ExperimentPlan(plan.conditions, tuple(args.seeds), cfg)
    start = time.perf_counter()
    report = run_matrix(plan, max_workers=args.workers)
    path = emit_plot_data(report, args.out)
    print(report.summary())
    print(f"\n{len(report.cells)} cells in {time.perf_counter() - start:.0f} s, report at {path}")
    return 1 if report.failed else 0


if __name__ == "__main__":
    sys.exit(main())
