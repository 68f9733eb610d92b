"""How the initial covariance shifts sevis against full_slam.

Runs a small batch with the declared prior and with a tight orientation and
velocity prior, and prints final position RSSE and drift ratios for each.

    python scripts/prior_sensitivity.py --runs 4
"""

import argparse

import numpy as np

from sevis.harness import default_configs, run_monte_carlo
from sevis.simulator import SimConfig

PRIORS = {
    "declared (3 deg, 0.1 m/s)": {},
    "tight (0.1 deg, 0.01 m/s)": dict(init_sigma_theta=float(np.radians(0.1)), init_sigma_v=0.01),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()

    for label, overrides in PRIORS.items():
        series, _ = run_monte_carlo(SimConfig(), default_configs(**overrides), args.runs,
                                    seed=args.seed, workers=args.workers)
        print(label)
        for name, s in series.items():
            p64 = s.at(64.0)[0]
            print(f"  {name:10s} final {s.pos[-1]:.4f} m  final/64s {s.pos[-1] / p64:.2f}")
        print(f"  sevis/full_slam final ratio {series['sevis'].pos[-1] / series['full_slam'].pos[-1]:.2f}")


if __name__ == "__main__":
    main()
