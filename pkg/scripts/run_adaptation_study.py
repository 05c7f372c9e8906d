"""Fix one initialization recipe and vary the adaptation-stage augmentation.

    python scripts/run_adaptation_study.py --init MITaskAugSP --out results/adaptation.csv
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from metainit.config import desk_config, load_config
from metainit.harness import ADAPT_METHODS, CONDITIONS, ExperimentPlan, emit_plot_data, run_adaptation_study


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--init", nargs="+", default=["MI", "MITaskAugSP"], choices=CONDITIONS)
    ap.add_argument("--methods", nargs="+", default=list(ADAPT_METHODS), choices=ADAPT_METHODS)
    ap.add_argument("--out", default="results/adaptation.csv")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()

    cfg = desk_config() if args.config is None else load_config(args.config)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plan = ExperimentPlan.from_config(cfg)
    status = 0
    for init in args.init:
        report = run_adaptation_study(plan, init, args.methods, max_workers=args.workers)
        out = args.out if len(args.init) == 1 else args.out.replace(".csv", f"_{init}.csv")
        emit_plot_data(report, out)
        print(report.summary(), f"\nreport at {out}\n")
        status |= bool(report.failed)
    return status


if __name__ == "__main__":
    sys.exit(main())
