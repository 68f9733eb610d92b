"""Monte-Carlo runs, error aggregation and timing benchmarks."""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from sevis.estimator import EstimatorConfig, Estimator, LinearSystem, schmidt_update, timing_row, TIMING_COLUMNS
from sevis.geometry import quat_error, small_angle_update
from sevis.propagation import CompoundedTransition, propagate_covariance
from sevis.simulator import SimConfig, SimWorld
from sevis.state import (
    CLONE_DIM,
    FEAT_DIM,
    IMU_DIM,
    PartitionedCovariance,
    SevisState,
    augment_clone,
    ClonePose,
    FeatureState,
    marginalize_clone,
    marginalize_schmidt_feature,
    move_feature_to_schmidt,
)

logger = logging.getLogger(__name__)

PSD_TOL = 1e-6


@dataclass
class RunResult:
    mode: str
    run: int
    seed: int
    t: np.ndarray
    err_pos: np.ndarray        # m, per camera step
    err_ori: np.ndarray        # rad
    p_est: np.ndarray
    p_true: np.ndarray
    aborted: bool = False
    reason: str = ""
    timing: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def csv(self):
        lines = ["t,err_pos_m,err_ori_rad,px,py,pz,tx,ty,tz"]
        for i in range(len(self.t)):
            vals = (self.t[i], self.err_pos[i], self.err_ori[i], *self.p_est[i], *self.p_true[i])
            lines.append(",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


@dataclass
class RsseSeries:
    mode: str
    t: np.ndarray
    pos: np.ndarray
    ori: np.ndarray

    def csv(self):
        lines = ["t,rsse_pos_m,rsse_ori_rad"]
        lines += [f"{t!r},{p!r},{o!r}" for t, p, o in zip(self.t.tolist(), self.pos.tolist(), self.ori.tolist())]
        return "\n".join(lines) + "\n"

    def at(self, t):
        """Value at the camera step closest to ``t``."""
        i = int(np.argmin(np.abs(self.t - t)))
        return self.pos[i], self.ori[i]


def min_eig_ratio(cov):
    P = cov.full()
    return float(np.linalg.eigvalsh(P)[0] / max(np.trace(P), 1e-300))


def initial_estimate(truth_state, P0, rng, scale=1.0):
    """Perturb the true IMU state by a draw from ``scale**2 * P0``."""
    dx = scale * (np.linalg.cholesky(P0) @ rng.standard_normal(IMU_DIM))
    s = truth_state.copy()
    s.q = small_angle_update(s.q, dx[0:3])
    s.bg = s.bg + dx[3:6]
    s.v = s.v + dx[6:9]
    s.ba = s.ba + dx[9:12]
    s.p = s.p + dx[12:15]
    return s


def run_single(sim_config, est_config, psd_every=25, log_every=0, perturb_init=True):
    """Process one simulated trajectory; never raises on PSD loss."""
    world = SimWorld(sim_config)
    noise = sim_config.noise
    est_config = replace(est_config, max_clones=sim_config.clone_window, sigma_pixel=sim_config.sigma_uv)
    P0 = est_config.initial_covariance(noise)
    imu0 = world.truth_at(0.0).imu_state(0.0)
    if perturb_init:
        # noise_scale also scales the initial error, so a zero-noise world is exact
        imu0 = initial_estimate(imu0, P0, world.rng["init"], sim_config.noise_scale)
    est = Estimator(est_config, noise, world.ext, imu0, P0, sim_config.gravity, rng=world.rng["assoc"])

    dt = 1.0 / sim_config.imu_rate
    per_cam = sim_config.imu_per_cam
    n_cam = world.n_imu // per_cam
    t_out = np.zeros(n_cam)
    err_p = np.zeros(n_cam)
    err_q = np.zeros(n_cam)
    p_est = np.zeros((n_cam, 3))
    p_true = np.zeros((n_cam, 3))
    res = RunResult(est_config.mode, 0, sim_config.seed, t_out, err_p, err_q, p_est, p_true)

    for c in range(n_cam):
        for j in range(per_cam):
            k = c * per_cam + j
            sample = world.gen_imu(k * dt, dt)
            est.propagate(sample, dt)
        t = (c + 1) * per_cam * dt
        est.state.imu.timestamp = t
        obs = world.gen_bearings(t)
        report = est.step_image(obs)
        res.timing.append(report)
        for key, n in report.failures.items():
            res.failures[key] = res.failures.get(key, 0) + n

        tr = world.truth_at(t)
        imu = est.state.imu
        t_out[c] = t
        p_est[c] = imu.p
        p_true[c] = tr.p
        err_p[c] = np.linalg.norm(imu.p - tr.p)
        err_q[c] = np.linalg.norm(quat_error(imu.q, tr.q))
        if log_every and (c + 1) % log_every == 0:
            logger.info("%s t=%.1f pos_err=%.4f ori_err=%.5f slam=%d map=%d", est_config.mode, t,
                        err_p[c], err_q[c], len(est.state.active_features), len(est.state.schmidt_features))
        if (psd_every and (c + 1) % psd_every == 0) or c == n_cam - 1:
            ratio = min_eig_ratio(est.cov)
            if ratio < -PSD_TOL or not np.isfinite(ratio):
                res.aborted = True
                res.reason = f"covariance lost PSD at t={t:.2f} (min eig/trace {ratio:.3g})"
                logger.warning("%s seed %d: %s", est_config.mode, sim_config.seed, res.reason)
                n = c + 1
                res.t, res.err_pos, res.err_ori = t_out[:n], err_p[:n], err_q[:n]
                res.p_est, res.p_true = p_est[:n], p_true[:n]
                return res
    return res


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _run_job(job):
    sim_config, est_config, run_idx = job
    res = run_single(sim_config, est_config)
    res.run = run_idx
    return res


def aggregate(results, mode):
    ok = [r for r in results if not r.aborted]
    if not ok:
        raise RuntimeError(f"every {mode} run aborted")
    t = ok[0].t
    pos = np.mean([r.err_pos for r in ok], axis=0)
    ori = np.mean([r.err_ori for r in ok], axis=0)
    return RsseSeries(mode, t, pos, ori)


def run_monte_carlo(sim_config, est_configs, runs, seed=0, workers=None, out_dir=None):
    """Run every configuration on ``runs`` worlds seeded ``seed + r``.

    ``est_configs`` maps a name to an :class:`EstimatorConfig`. Returns
    ``(series, results)`` keyed by name; results keep run order and the
    series is ``None`` when every run of that name aborted.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    jobs = []
    for name, ec in est_configs.items():
        for r in range(runs):
            jobs.append((name, (replace(sim_config, seed=seed + r), ec, r)))
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        _limit_threads()
        outputs = [_run_job(j) for _, j in jobs]
    else:
        with ProcessPoolExecutor(workers, initializer=_limit_threads) as pool:
            outputs = list(pool.map(_run_job, [j for _, j in jobs]))

    results = {name: [] for name in est_configs}
    for (name, _), res in zip(jobs, outputs):
        results[name].append(res)
    # a mode whose every run aborted has no series
    series = {name: aggregate(rs, name) if any(not r.aborted for r in rs) else None
              for name, rs in results.items()}
    if out_dir is not None:
        write_outputs(out_dir, series, results)
    return series, results


def start_end_error(p_est, p_true, path_length=None):
    """Start-end error (m) and its percentage of the travelled distance.

    The estimate is aligned to the truth at the first sample.
    """
    p_est = np.asarray(p_est, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    if path_length is None:
        path_length = float(np.linalg.norm(np.diff(p_true, axis=0), axis=1).sum())
    err = float(np.linalg.norm((p_est[-1] - p_est[0]) - (p_true[-1] - p_true[0])))
    return err, 100.0 * err / path_length if path_length > 0 else float("nan")


def summary(series, results):
    lines = []
    for name, s in series.items():
        rs = results[name]
        aborted = sum(r.aborted for r in rs)
        if s is None:
            lines.append(f"{name}: runs={len(rs)} aborted={aborted} (no surviving runs)")
            continue
        pct = [start_end_error(r.p_est, r.p_true)[1] for r in rs if not r.aborted]
        lines.append(
            f"{name}: runs={len(rs)} aborted={aborted} final_rsse_pos={s.pos[-1]:.4f} m "
            f"final_rsse_ori={np.degrees(s.ori[-1]):.4f} deg "
            f"median_start_end={np.median(pct) if pct else float('nan'):.4f} %")
    return "\n".join(lines) + "\n"


def write_outputs(out_dir, series, results):
    os.makedirs(out_dir, exist_ok=True)
    for name, s in series.items():
        if s is not None:
            with open(os.path.join(out_dir, f"rsse_{name}.csv"), "w") as fh:
                fh.write(s.csv())
        run_dir = os.path.join(out_dir, "runs")
        os.makedirs(run_dir, exist_ok=True)
        for r in results[name]:
            with open(os.path.join(run_dir, f"{name}_run{r.run:03d}.csv"), "w") as fh:
                fh.write(r.csv())
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(summary(series, results))


def write_timing_csv(path, reports):
    with open(path, "w") as fh:
        fh.write(",".join(TIMING_COLUMNS) + "\n")
        for rep in reports:
            fh.write(timing_row(rep) + "\n")


# -- scaling benchmark ---------------------------------------------------------

def _random_psd(rng, n, rank=20):
    B = rng.standard_normal((n, rank)) * 0.1
    return B @ B.T + 0.01 * np.eye(n)


BENCH_OBSERVED = 15


def _bench_problem(mode, n_map, rng, n_clones=15, n_slam=6, rows=2 * BENCH_OBSERVED):
    """Synthetic state/covariance with ``n_map`` map features.

    In ``sevis`` they are Schmidt states; in ``full_slam`` they are active.
    """
    n_active_feats = n_slam + (n_map if mode == "full_slam" else 0)
    na = IMU_DIM + CLONE_DIM * n_clones + FEAT_DIM * n_active_feats
    ns = FEAT_DIM * n_map if mode == "sevis" else 0
    P = _random_psd(rng, na + ns)
    cov = PartitionedCovariance.from_blocks(P[:na, :na], P[:na, na:], P[na:, na:],
                                            n_max=n_map + 1 if mode == "sevis" else 0)
    state = SevisState(max_clones=n_clones + 1)
    state.clones = [ClonePose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), float(-i)) for i in range(n_clones)]
    state.active_features = [FeatureState(i, np.zeros(3)) for i in range(n_active_feats)]
    if mode == "sevis":
        state.schmidt_features = [FeatureState(100000 + i, np.zeros(3)) for i in range(n_map)]

    # measurement rows from rows/2 observed map features on the newest clone
    k = rows // 2
    feats = rng.choice(n_map, size=k, replace=False)
    H_A = np.zeros((rows, na))
    H_A[:, IMU_DIM:IMU_DIM + CLONE_DIM] = rng.standard_normal((rows, CLONE_DIM))
    R = 1e-2 * np.eye(rows)
    r = 1e-3 * rng.standard_normal(rows)
    if mode == "sevis":
        H_S = np.zeros((rows, FEAT_DIM * k))
        for j in range(k):
            H_S[2 * j:2 * j + 2, 3 * j:3 * j + 3] = rng.standard_normal((2, 3))
        index = np.concatenate([np.arange(3 * f, 3 * f + 3) for f in feats])
        sys = LinearSystem(H_A, r, R, H_S, index)
    else:
        base = IMU_DIM + CLONE_DIM * n_clones + FEAT_DIM * n_slam
        for j, f in enumerate(feats):
            c = base + 3 * f
            H_A[2 * j:2 * j + 2, c:c + 3] = rng.standard_normal((2, 3))
        sys = LinearSystem(H_A, r, R)
    return state, cov, sys


def _time_stages(mode, n_map, seed):
    rng = np.random.default_rng(seed)
    state, cov, sys = _bench_problem(mode, n_map, rng)
    ct = CompoundedTransition(np.eye(IMU_DIM) + 0.01 * rng.standard_normal((IMU_DIM, IMU_DIM)),
                              1e-6 * np.eye(IMU_DIM))
    t0 = time.perf_counter()
    propagate_covariance(cov, ct)
    t1 = time.perf_counter()
    schmidt_update(None, cov, sys)
    t2 = time.perf_counter()
    augment_clone(state, cov)
    marginalize_clone(state, cov, len(state.clones) - 1)
    if mode == "sevis":
        marginalize_schmidt_feature(state, cov, state.schmidt_features[0].id)
        move_feature_to_schmidt(state, cov, state.active_features[-1].id)
    t3 = time.perf_counter()
    return t1 - t0, t2 - t1, t3 - t2


BENCH_COLUMNS = ("mode", "n_map", "repeat", "prop_s", "update_s", "mgmt_s", "total_s")


def run_scaling_bench(map_sizes=(100, 200, 400, 800), repeats=7, modes=("sevis", "full_slam"),
                      seed=0, csv_path=None):
    """Median per-stage wall time for each mode and map size.

    Returns ``(table, slopes)``: ``table[mode][n] = (prop, update, mgmt)``
    medians and the log-log slope of update time against ``n``.
    """
    if max(map_sizes) < 4 * min(map_sizes):
        raise ValueError("map sizes must span at least a factor of 4")
    if min(map_sizes) < BENCH_OBSERVED:
        raise ValueError(f"each update observes {BENCH_OBSERVED} map features; use n >= {BENCH_OBSERVED}")
    _limit_threads()
    raw = []
    table = {}
    for mode in modes:
        table[mode] = {}
        for n in map_sizes:
            _time_stages(mode, n, seed)  # warm-up
            samples = [_time_stages(mode, n, seed + 1 + i) for i in range(repeats)]
            for i, s in enumerate(samples):
                raw.append((mode, n, i, *s, sum(s)))
            table[mode][n] = tuple(float(np.median([s[j] for s in samples])) for j in range(3))
    slopes = {}
    for mode in modes:
        x = np.log(np.array(map_sizes, dtype=float))
        y = np.log([table[mode][n][1] for n in map_sizes])
        slopes[mode] = float(np.polyfit(x, y, 1)[0])
    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write(",".join(BENCH_COLUMNS) + "\n")
            for row in raw:
                fh.write(",".join(str(v) for v in row) + "\n")
    return table, slopes


def default_configs(modes=("vio", "full_slam", "sevis"), **overrides):
    return {m: EstimatorConfig.for_mode(m, **overrides) for m in modes}


__all__ = [
    "RunResult", "RsseSeries", "run_single", "run_monte_carlo", "run_scaling_bench",
    "start_end_error", "default_configs", "aggregate", "summary", "write_outputs",
]
