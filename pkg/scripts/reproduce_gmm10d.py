#!/usr/bin/env python3
"""Ten-seed SMC on the 10-D benchmark mixture, FP++ and single-probe Hutchinson.

Runs ``flowpert bench-gmm`` with ``configs/gmm10d.toml`` and prints the
per-estimator modal weight.  Takes roughly 15 minutes on one core; pass
``--workers N`` to spread the runs over processes.
"""

import argparse
import csv
import sys
from pathlib import Path

from flowpert.cli import main as flowpert_main

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "gmm10d.toml"))
    ap.add_argument("--out", default="runs/gmm10d")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    argv = ["bench-gmm", "--config", args.config, "--out", args.out, "--workers", str(args.workers)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    code = flowpert_main(argv)
    if code:
        return code
    with open(Path(args.out) / "summary_by_estimator.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            print(f"{row['estimator']:>18}: {float(row['modal_weight_mean']):.4f} +/- "
                  f"{float(row['modal_weight_std']):.4f}  (ancestors {float(row['distinct_ancestors_mean']):.0f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
