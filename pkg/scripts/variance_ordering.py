#!/usr/bin/env python3
"""Per-point Var[dS] of FP and FP++ on the 10-D benchmark flow (T = 100)."""

import argparse

import numpy as np

from flowpert.estimators import EstimatorConfig, estimator_stats
from flowpert.validation import benchmark_flow, variance_difference_z


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=10)
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    flow = benchmark_flow(10, args.steps, seed=0)
    rng = np.random.default_rng(args.seed)
    print("point  var_fp      var_fppp    ratio   z(fp > fppp)")
    for i, z in enumerate(rng.standard_normal((args.points, 10))):
        fp = estimator_stats(flow, z, EstimatorConfig(kind="fp"), args.draws, rng)
        pp = estimator_stats(flow, z, EstimatorConfig(kind="fppp"), args.draws, rng)
        zs = variance_difference_z(fp.delta_s, pp.delta_s)
        print(f"{i:5d}  {fp.var_delta_s:10.4g}  {pp.var_delta_s:10.4g}  {fp.var_delta_s / pp.var_delta_s:6.1f}  {zs:8.2f}")


if __name__ == "__main__":
    main()
