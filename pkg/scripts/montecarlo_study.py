"""Monte-Carlo comparison of vio, full_slam and sevis on the circle world.

Prints the drift ratios (final vs end of loop 2), final RSSE and median
start-end error per estimator, and writes the RSSE/run CSVs.

    python scripts/montecarlo_study.py --runs 50 --out-dir results/mc
"""

import argparse
import time

import numpy as np

from sevis.harness import default_configs, run_monte_carlo, start_end_error
from sevis.simulator import SimConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--duration", type=float, default=320.0)
    ap.add_argument("--out-dir", default="results/montecarlo")
    args = ap.parse_args()

    sim = SimConfig(duration=args.duration)
    t0 = time.perf_counter()
    series, results = run_monte_carlo(sim, default_configs(), args.runs, seed=args.seed,
                                      workers=args.workers, out_dir=args.out_dir)
    print(f"{args.runs} runs per estimator in {(time.perf_counter() - t0) / 60:.1f} min")
    print(f"{'mode':10s} {'rsse@64s':>9s} {'final':>8s} {'ratio':>6s} {'ori deg':>8s} {'s-e %':>7s} aborted")
    for name, s in series.items():
        rs = results[name]
        if s is None:
            print(f"{name:10s} all runs aborted")
            continue
        p64 = s.at(64.0)[0]
        pct = np.median([start_end_error(r.p_est, r.p_true)[1] for r in rs if not r.aborted])
        print(f"{name:10s} {p64:9.4f} {s.pos[-1]:8.4f} {s.pos[-1] / p64:6.2f} "
              f"{np.degrees(s.ori[-1]):8.3f} {pct:7.3f} {sum(r.aborted for r in rs)}")


if __name__ == "__main__":
    main()
