"""Fusion-variant and prototype-count grids on a synthetic cohort."""

import argparse
import sys

from mmsurv.analysis import PLANTED_CONFIG
from mmsurv.synthetic import SyntheticCohortSpec, generate_synthetic_cohort
from mmsurv.training import FUSION_GRID, K_GRID, grid_csv, run_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", choices=["fusion", "K", "both"], default="both")
    ap.add_argument("--patients", type=int, default=60)
    ap.add_argument("--epochs", type=int, default=PLANTED_CONFIG.max_epochs)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    cohort = generate_synthetic_cohort(SyntheticCohortSpec(n_patients=args.patients, seed=args.seed))
    base = PLANTED_CONFIG.replace(max_epochs=args.epochs, seed=args.seed)
    grid = {"fusion": FUSION_GRID, "K": K_GRID, "both": FUSION_GRID + K_GRID}[args.grid]
    sys.stdout.write(grid_csv(run_grid(base, grid, cohort)))


if __name__ == "__main__":
    main()
