"""HDP-HMM regime-count estimates on simulated 2-regime data across seeds.

Usage: python scripts/regime_count.py [--t 70] [--seeds 10] [--gamma-prior 5 1]
"""

import argparse
from collections import Counter

import numpy as np

from regime_simopt.msm import Exponential, ThetaVector, simulate
from regime_simopt.optimizer import infer_regime_count
from regime_simopt.posterior import GammaPrior, HdpPrior, PriorSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t", type=int, default=70)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--single", action="store_true", help="simulate one regime (rate 1) instead of two")
    ap.add_argument("--gamma-prior", type=float, nargs=2, default=[5.0, 1.0])
    ap.add_argument("--alpha-prior", type=float, nargs=2, default=[5.0, 1.0])
    args = ap.parse_args()

    if args.single:
        theta = ThetaVector(Exponential(), [[1.0]], [[1.0]])
    else:
        theta = ThetaVector(Exponential(), [[1.0], [1 / 20]], [[0.9, 0.1], [0.1, 0.9]])
    hdp = HdpPrior(GammaPrior(*args.gamma_prior), GammaPrior(*args.alpha_prior))
    prior = PriorSpec(Exponential(), rate=GammaPrior(1.0, 1.0), hdp=hdp)
    tau = 1 / np.sqrt(args.t)
    out = []
    for seed in range(args.seeds):
        vals = simulate(theta, args.t, seed).values
        s_max, r_hat = infer_regime_count(vals, 10, 100, tau, prior, seed=seed)
        out.append(r_hat)
        print(f"seed {seed}: r_hat {r_hat}, s_max {s_max}")
    print("r_hat frequencies:", dict(sorted(Counter(out).items())))


if __name__ == "__main__":
    main()
