"""Estimate the Ornstein-Uhlenbeck terminal score and compare with the
closed form, printing a side-by-side table.

Usage: python scripts/ou_score_demo.py [--paths 100000] [--steps 256]
"""

import argparse
import math

import numpy as np

from pathscore import TimeGrid, analytic_score_linear, estimate_score, make_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=256)
    ap.add_argument("--seed", type=int, default=20260814)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    model = make_model("ornstein_uhlenbeck")
    grid = TimeGrid(1.0, args.steps)
    x0 = np.array([0.0])
    gamma = (1.0 - math.exp(-2.0)) / 2.0
    ys = np.linspace(-2 * math.sqrt(gamma), 2 * math.sqrt(gamma), 9)

    table = estimate_score(
        model, grid, x0, 1.0, ys, args.paths, args.seed, workers=args.workers
    )
    print(f"{'y':>8} {'estimate':>10} {'analytic':>10} {'|dev|':>8} {'3*SE':>8} {'n_eff':>8}")
    for q in range(ys.size):
        ana = analytic_score_linear(model, 1.0, x0, np.array([ys[q]]))[0]
        dev = abs(table.scores[q, 0] - ana)
        print(
            f"{ys[q]:8.4f} {table.scores[q, 0]:10.5f} {ana:10.5f} "
            f"{dev:8.4f} {3 * table.stderr[q, 0]:8.4f} {table.n_eff[q]:8.0f}"
        )
    print(f"excluded paths: {table.excluded}")


if __name__ == "__main__":
    main()
