"""Run a config's methods and print the final cumulative GAP with paired comparisons.

Usage: python scripts/compare_methods.py configs/exp4.yaml [--macros 10] [--out results/exp4]
"""

import argparse
import logging

import numpy as np
from scipy import stats

from regime_simopt.harness import ExperimentSpec, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--macros", type=int)
    ap.add_argument("--out")
    ap.add_argument("--baseline", default=None, help="method compared against the others (default: first)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = ExperimentSpec.from_yaml(args.config)
    if args.macros:
        spec.macros = args.macros
    traces, _ = run_experiment(spec, args.out or spec.out)
    final = {}
    for tr in sorted(traces, key=lambda t: t.macro):
        final.setdefault(tr.method, []).append(tr.cum_gap[-1])
    base = args.baseline or spec.methods[0]
    print(f"{'method':<15}{'mean final cum GAP':>20}{'se':>10}")
    for m, v in final.items():
        v = np.asarray(v)
        se = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
        print(f"{m:<15}{v.mean():>20.3f}{se:>10.3f}")
    if spec.macros > 1:
        for m, v in final.items():
            if m != base:
                p = stats.ttest_rel(final[base], v, alternative="less").pvalue
                print(f"{base} < {m}: one-sided paired p = {p:.4f}")


if __name__ == "__main__":
    main()
