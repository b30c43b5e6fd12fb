"""Error of the posterior-averaged objective versus data length on the 2-regime quadratic.

Usage: python scripts/consistency.py [--macros 20] [--out consistency.csv]
"""

import argparse

import numpy as np

from regime_simopt.harness import consistency_study, write_consistency
from regime_simopt.msm import Exponential, ThetaVector
from regime_simopt.problems import QuadExp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--macros", type=int, default=20)
    ap.add_argument("--t", type=int, nargs="+", default=[50, 100, 200, 400, 800])
    ap.add_argument("--x", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=8)
    ap.add_argument("--out", default="consistency.csv")
    args = ap.parse_args()

    theta = ThetaVector(Exponential(), [[0.1], [1.0]], [[0.9, 0.1], [0.1, 0.9]])
    rows = consistency_study(QuadExp(), theta, [args.x], args.t, seed=args.seed, macros=args.macros)
    write_consistency(rows, args.out)
    print(f"{'t':>6}{'mean |err|':>14}{'se':>10}{'sd(sqrt(t) err)':>18}")
    for r in rows:
        print(f"{r['t']:>6}{r['mean_abs_error']:>14.4f}{r['se']:>10.4f}{r['sd_scaled']:>18.3f}")
    slope = np.polyfit(np.log([r["t"] for r in rows]), np.log([r["mean_abs_error"] for r in rows]), 1)[0]
    print(f"log-log slope of mean |err| vs t: {slope:.3f} (root-t rate is -0.5)")


if __name__ == "__main__":
    main()
