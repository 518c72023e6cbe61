#!/usr/bin/env python3
"""Paired-seed FP++ vs. single-probe Hutchinson at D = 100 (long-running).

Counts the seeds on which FP++'s component-0 fraction is closer to 0.25 than
Hutchinson's.  Several hours on one core.
"""

import argparse
import csv
import sys
from pathlib import Path

from flowpert.cli import main as flowpert_main

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "gmm100d.toml"))
    ap.add_argument("--out", default="runs/gmm100d")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    code = flowpert_main(["bench-gmm", "--config", args.config, "--out", args.out, "--workers", str(args.workers)])
    if code:
        return code
    by_seed = {}
    with open(Path(args.out) / "summary.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["status"] == "ok":
                by_seed.setdefault(row["seed"], {})[row["estimator"]] = float(row["modal_weight"])
    wins = total = 0
    for seed, pair in sorted(by_seed.items(), key=lambda kv: int(kv[0])):
        if len(pair) != 2:
            continue
        fp, hu = pair["FPpp"], pair["HutchGaussian(1)"]
        win = abs(fp - 0.25) < abs(hu - 0.25)
        wins += win
        total += 1
        print(f"seed {seed}: FP++ {fp:.4f}  G1 {hu:.4f}  {'FP++' if win else 'G1'} closer")
    print(f"FP++ closer to 0.25 in {wins}/{total} paired seeds")
    return 0 if wins >= 8 else 1


if __name__ == "__main__":
    sys.exit(main())
