"""Brute-force (s, S) grid per demand rate, next to the closed-form long-run optimum.

Usage: python scripts/inventory_grid.py [--rates 1 0.05] [--reps 10000]
"""

import argparse

import numpy as np

from regime_simopt.problems import Inventory, inventory_grid_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[1 / 30, 1 / 20, 1 / 18, 1 / 12, 1.0])
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    s_grid = np.array([1, 5, 10, 20, 35, 50, 60, 69], dtype=float)
    S_grid = np.array([70, 80, 90, 100, 120, 140, 160, 190, 220, 250], dtype=float)
    for rate in args.rates:
        mean, se = inventory_grid_search(rate, s_grid, S_grid, args.reps, seed=args.seed)
        i, j = np.unravel_index(np.argmin(mean), mean.shape)
        x, z = Inventory().true_optimum([rate])
        print(f"rate {rate:.4f}: grid best ({s_grid[i]:.0f}, {S_grid[j]:.0f}) cost {mean[i, j]:.2f} "
              f"+/- {se[i, j]:.2f}; closed form ({x[0]:.1f}, {x[1]:.1f}) cost {z:.2f}")


if __name__ == "__main__":
    main()
