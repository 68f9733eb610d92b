"""Command line entry point: ``sevis {montecarlo,bench,single,check}``.

The optional YAML config has up to four sections::

    sim:        # SimConfig fields
      duration: 320.0
    estimator:  # EstimatorConfig overrides applied to every mode
      max_update_rows: 30
    modes: [vio, full_slam, sevis]
    bench:
      map_sizes: [100, 200, 400, 800]
      repeats: 7
"""

import argparse
import logging
import os
import sys
from dataclasses import fields, replace

import yaml

from sevis import harness
from sevis.checks import run_checks
from sevis.estimator import MODES, EstimatorConfig
from sevis.simulator import SimConfig, SimWorld, export_truth_csv

logger = logging.getLogger("sevis")

SECTIONS = ("sim", "estimator", "modes", "bench")


def load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for section, cls in (("sim", SimConfig), ("estimator", EstimatorConfig)):
        names = {f.name for f in fields(cls)}
        bad = set(cfg.get(section) or {}) - names
        if bad:
            raise ValueError(f"unknown {section} keys: {sorted(bad)}")
    return cfg


def sim_config(cfg, seed=None):
    sim = dict(cfg.get("sim") or {})
    if "lever_arm" in sim:
        sim["lever_arm"] = tuple(sim["lever_arm"])
    out = SimConfig(**sim)
    return replace(out, seed=seed) if seed is not None else out


def selected_modes(cfg, mode):
    if mode not in (None, "all"):
        return (mode,)
    return tuple(cfg.get("modes") or MODES)


def est_configs(cfg, modes):
    overrides = dict(cfg.get("estimator") or {})
    overrides.pop("mode", None)
    return harness.default_configs(modes, **overrides)


def cmd_montecarlo(args, cfg):
    sim = sim_config(cfg)
    configs = est_configs(cfg, selected_modes(cfg, args.mode))
    logger.info("montecarlo: %d runs x %s, %.0f s each, seed %d", args.runs, list(configs),
                sim.duration, args.seed)
    series, results = harness.run_monte_carlo(sim, configs, args.runs, seed=args.seed,
                                              workers=args.workers, out_dir=args.out_dir)
    print(harness.summary(series, results), end="")
    aborted = [(m, r.run, r.reason) for m, rs in results.items() for r in rs if r.aborted]
    for m, run, reason in aborted:
        print(f"ABORTED {m} run {run}: {reason}", file=sys.stderr)
    return 1 if aborted else 0


def cmd_bench(args, cfg):
    bench = cfg.get("bench") or {}
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "bench_timing.csv")
    modes = tuple(m for m in selected_modes(cfg, args.mode) if m != "vio") or ("sevis", "full_slam")
    table, slopes = harness.run_scaling_bench(
        map_sizes=tuple(bench.get("map_sizes", (100, 200, 400, 800))),
        repeats=int(bench.get("repeats", 7)), modes=modes, seed=args.seed, csv_path=path)
    for mode, rows in table.items():
        for n, (prop, upd, mgmt) in rows.items():
            print(f"{mode:9s} n={n:4d} prop={prop * 1e3:8.3f} ms update={upd * 1e3:8.3f} ms "
                  f"mgmt={mgmt * 1e3:8.3f} ms")
    for mode, s in slopes.items():
        print(f"{mode}: log-log update slope {s:.2f}")
    print(f"raw timings: {path}")
    return 0


def cmd_single(args, cfg):
    sim = sim_config(cfg, args.seed)
    mode = args.mode if args.mode not in (None, "all") else "sevis"
    est = est_configs(cfg, (mode,))[mode]
    os.makedirs(args.out_dir, exist_ok=True)
    res = harness.run_single(sim, est, log_every=int(sim.cam_rate))
    with open(os.path.join(args.out_dir, f"{mode}_seed{args.seed}.csv"), "w") as fh:
        fh.write(res.csv())
    harness.write_timing_csv(os.path.join(args.out_dir, f"{mode}_seed{args.seed}_timing.csv"), res.timing)
    export_truth_csv(SimWorld(sim), os.path.join(args.out_dir, f"truth_seed{args.seed}.csv"))
    err, pct = harness.start_end_error(res.p_est, res.p_true)
    print(f"{mode} seed {args.seed}: final pos err {res.err_pos[-1]:.4f} m, "
          f"start-end {err:.4f} m ({pct:.3f} %), failures {res.failures or 'none'}")
    if res.aborted:
        print(f"ABORTED: {res.reason}", file=sys.stderr)
        return 1
    return 0


def cmd_check(args, cfg):
    results = run_checks(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {"montecarlo": cmd_montecarlo, "bench": cmd_bench, "single": cmd_single, "check": cmd_check}


def build_parser():
    p = argparse.ArgumentParser(prog="sevis", description="Schmidt-EKF VI-SLAM simulation harness")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="YAML config with sim/estimator/modes/bench sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--mode", choices=list(MODES) + ["all"], default=None)
    p.add_argument("--workers", type=int, default=None, help="default: all available CPUs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "single" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
