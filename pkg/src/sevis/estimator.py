"""Schmidt-EKF visual-inertial estimator.

Three measurement paths share one update routine:

* MSCKF features: lost (or window-spanning) tracks, triangulated and
  projected onto the left nullspace of their feature Jacobian.
* SLAM features: estimated in the active state, updated by standard EKF.
* Map features: Schmidt states; they enter the innovation but receive zero
  gain, so their mean and ``P_SS`` are never modified.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.linalg.lapack import dpocon
from scipy.stats import chi2

from sevis import assoc
from sevis.camera import (
    Extrinsics,
    FeatureTrack,
    NonPositiveDepth,
    TriangulationError,
    predict,
    triangulate,
)
from sevis.propagation import (
    GRAVITY,
    CompoundedTransition,
    compound,
    error_state_jacobians,
    propagate_covariance,
)
from sevis.state import (
    FEAT_DIM,
    FeatureState,
    PartitionedCovariance,
    SevisState,
    add_active_feature,
    augment_clone,
    marginalize_active_feature,
    marginalize_clone,
    marginalize_schmidt_feature,
    move_feature_to_schmidt,
)

logger = logging.getLogger(__name__)

MODES = ("vio", "full_slam", "sevis")
SIGMA_PIXEL = float(np.tan(np.radians(0.17)))


class RankDeficientFeature(ValueError):
    pass


class SingularInnovation(np.linalg.LinAlgError):
    pass


@dataclass
class EstimatorConfig:
    mode: str = "sevis"
    max_slam_features: int = 6
    max_map_features: int = 90
    max_clones: int = 15
    max_update_rows: int = 30
    sigma_pixel: float = SIGMA_PIXEL
    init_sigma_theta: float = float(np.radians(3.0))
    init_sigma_v: float = 0.1
    init_sigma_p: float = 0.01
    # None: one hour of bias random walk
    init_sigma_bg: float = None
    init_sigma_ba: float = None
    # None: exact delayed initialization; a number: large-prior EKF update
    slam_init_prior: float = None
    min_track_length: int = 2
    chi2_gate: bool = False
    chi2_quantile: float = 0.95
    assoc_recall: float = 1.0
    assoc_outlier_rate: float = 0.0
    kf_insert_min: int = 5
    kf_period: float = 1.0
    kf_min_overlap: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode != "sevis" and self.max_map_features:
            raise ValueError(f"{self.mode} keeps no Schmidt map features")

    @classmethod
    def for_mode(cls, mode, **overrides):
        defaults = {
            "vio": dict(max_slam_features=6, max_map_features=0),
            "full_slam": dict(max_slam_features=90, max_map_features=0),
            "sevis": dict(max_slam_features=6, max_map_features=90),
        }[mode]
        defaults.update(overrides)
        return cls(mode=mode, **defaults)

    def initial_covariance(self, noise):
        sbg = self.init_sigma_bg if self.init_sigma_bg is not None else noise.sigma_wg * 60.0
        sba = self.init_sigma_ba if self.init_sigma_ba is not None else noise.sigma_wa * 60.0
        sig = np.repeat([self.init_sigma_theta, sbg, self.init_sigma_v, sba, self.init_sigma_p], 3)
        return np.diag(sig**2)


@dataclass
class LinearSystem:
    """Stacked linearized measurements ``r = H_A dx_A + H_S dx_S + n``.

    ``H_S`` is stored compactly: its columns correspond to the Schmidt
    error-state indices in ``schmidt_index``; all other Schmidt columns are
    zero.
    """

    H_A: np.ndarray
    r: np.ndarray
    R: np.ndarray
    H_S: np.ndarray = None
    schmidt_index: np.ndarray = None

    def __post_init__(self):
        rows = self.H_A.shape[0]
        if self.r.shape != (rows,) or self.R.shape != (rows, rows):
            raise ValueError("row counts of H_A, r and R disagree")
        if self.H_S is None:
            self.H_S = np.zeros((rows, 0))
            self.schmidt_index = np.zeros(0, dtype=int)
        elif self.H_S.shape != (rows, len(self.schmidt_index)):
            raise ValueError("H_S does not match schmidt_index")

    @property
    def rows(self):
        return self.H_A.shape[0]

    @classmethod
    def dense(cls, H_A, H_S, r, R):
        return cls(H_A, r, R, H_S, np.arange(H_S.shape[1]))


@dataclass
class UpdateReport:
    t: float = 0.0
    features_used: dict = field(default_factory=lambda: dict(msckf=0, slam_init=0, slam=0, map=0))
    rows: dict = field(default_factory=lambda: dict(msckf=0, slam_init=0, slam=0, map=0))
    failures: dict = field(default_factory=dict)
    deferred: int = 0
    prop_s: float = 0.0
    update_s: float = 0.0
    mgmt_s: float = 0.0
    n_schmidt: int = 0

    @property
    def total_s(self):
        return self.prop_s + self.update_s + self.mgmt_s

    def fail(self, reason):
        self.failures[reason] = self.failures.get(reason, 0) + 1


TIMING_COLUMNS = ("t", "prop_s", "update_s", "mgmt_s", "total_s", "n_schmidt")


def timing_row(report):
    return ",".join([repr(report.t), repr(report.prop_s), repr(report.update_s),
                     repr(report.mgmt_s), repr(report.total_s), str(report.n_schmidt)])


def nullspace_project(H_x, H_f, r, R):
    """Remove the feature error from a stacked system via its left nullspace."""
    rows, k = H_f.shape
    if rows <= k:
        raise RankDeficientFeature(f"{rows} rows cannot constrain {k} feature dofs")
    Q, U = np.linalg.qr(H_f, mode="complete")
    d = np.abs(np.diag(U[:k]))
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        raise RankDeficientFeature("feature Jacobian is rank deficient")
    N = Q[:, k:]
    return N.T @ H_x, N.T @ r, N.T @ R @ N


def schmidt_update(state, cov, sys, cond_max=1e12):
    """Schmidt-EKF update; returns the active correction ``dx_A``.

    Only the active state (and ``state`` if given) is corrected. ``P_AA``
    and ``P_AS`` are updated, ``P_SS`` is left bit-identical.
    """
    if sys.H_A.shape[1] != cov.na:
        raise ValueError(f"H_A has {sys.H_A.shape[1]} columns, active dim is {cov.na}")
    P_AA, P_AS, P_SS = cov.P_AA, cov.P_AS, cov.P_SS
    H_A, H_S, idx = sys.H_A, sys.H_S, sys.schmidt_index

    if len(idx):
        P_AS_sel = P_AS[:, idx]
        P_SS_rows = P_SS[idx]
        # P_AA H_A^T + P_AS H_S^T
        M = P_AA @ H_A.T + P_AS_sel @ H_S.T
        S = H_A @ M + H_S @ (P_AS_sel.T @ H_A.T + P_SS_rows[:, idx] @ H_S.T) + sys.R
    else:
        M = P_AA @ H_A.T
        S = H_A @ M + sys.R
    S = 0.5 * (S + S.T)
    try:
        fac = cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    # LAPACK 1-norm reciprocal condition estimate from the Cholesky factor
    rcond, _ = dpocon(fac[0], np.abs(S).sum(axis=0).max(), uplo="L" if fac[1] else "U")
    if not rcond * cond_max > 1.0:
        raise SingularInnovation("innovation covariance is ill-conditioned")
    K = cho_solve(fac, M.T).T

    dx = K @ sys.r
    if cov.ns:
        HP = H_A @ P_AS
        if len(idx):
            HP += H_S @ P_SS_rows
        P_AS -= K @ HP
    P_AA -= K @ M.T
    cov.symmetrize_active()
    if state is not None:
        state.inject(dx)
    return dx


def _observation_rows(state, ext, na, feature_pos, track_times, uvs, clone_pos):
    """Residuals and Jacobian blocks for one feature seen from several clones.

    Returns ``(H_x, H_f, r)`` with ``H_x`` over the ``na`` active states.
    """
    n = len(track_times)
    H_x = np.zeros((2 * n, na))
    H_f = np.zeros((2 * n, 3))
    r = np.zeros(2 * n)
    for j, (t, uv) in enumerate(zip(track_times, uvs)):
        ci = clone_pos[t]
        clone = state.clones[ci]
        zhat, J = predict(feature_pos, clone, ext)
        off = state.clone_offset(ci)
        rs = slice(2 * j, 2 * j + 2)
        H_x[rs, off:off + 3] = J.H_theta
        H_x[rs, off + 3:off + 6] = J.H_p
        H_f[rs] = J.H_f
        r[rs] = uv - zhat
    return H_x, H_f, r


class Estimator:
    """Per-image orchestration of propagation, updates and management."""

    def __init__(self, config, noise, ext=None, imu=None, P0=None, gravity=GRAVITY, rng=None):
        self.config = config
        self.noise = noise
        self.ext = ext if ext is not None else Extrinsics()
        self.gravity = gravity
        self.state = SevisState(max_clones=config.max_clones)
        if imu is not None:
            self.state.imu = imu
        if P0 is None:
            P0 = config.initial_covariance(noise)
        self.cov = PartitionedCovariance(P0, n_max=config.max_map_features)
        self.tracks = {}
        self.ct = CompoundedTransition.identity()
        self._prop_steps = 0
        self._prop_time = 0.0
        self.keyframes = assoc.KeyframeDatabase(config.kf_insert_min, config.kf_period,
                                                config.kf_min_overlap)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._map_seq = {}
        self._seq = 0
        self.deferred = []
        self._chi2 = {}

    # -- propagation -------------------------------------------------------
    def propagate(self, sample, dt):
        t0 = time.perf_counter()
        Phi, Q, nxt = error_state_jacobians(self.state.imu, sample, dt, self.noise, self.gravity)
        self.ct = compound(self.ct, (Phi, Q))
        self.state.imu = nxt
        self._prop_steps += 1
        self._prop_time += time.perf_counter() - t0

    def flush_propagation(self):
        """Apply the compounded transition to the covariance."""
        t0 = time.perf_counter()
        if self._prop_steps:
            propagate_covariance(self.cov, self.ct)
            self.ct = CompoundedTransition.identity()
            self._prop_steps = 0
        elapsed = self._prop_time + time.perf_counter() - t0
        self._prop_time = 0.0
        return elapsed

    # -- association -------------------------------------------------------
    def associate(self, observations):
        if not self.config.max_map_features or not self.state.schmidt_features:
            return assoc.AssocResult()
        kf = self.keyframes.query(b.feature_id for b in observations)
        return assoc.match(observations, kf, self.config.assoc_recall, self.rng,
                           schmidt_ids=self.state.schmidt_ids(),
                           outlier_rate=self.config.assoc_outlier_rate)

    def step_image(self, observations):
        prop_s = self.flush_propagation()
        result = self.associate(observations)
        report = self.process_image(observations, result)
        report.prop_s = prop_s
        return report

    # -- helpers -----------------------------------------------------------
    def _gate_ok(self, H, r, R):
        if not self.config.chi2_gate:
            return True
        S = H @ self.cov.P_AA @ H.T + R
        dof = len(r)
        if dof not in self._chi2:
            self._chi2[dof] = chi2.ppf(self.config.chi2_quantile, dof)
        return float(r @ np.linalg.solve(S, r)) <= self._chi2[dof]

    def _feature_system(self, track, p_f, clone_pos):
        return _observation_rows(self.state, self.ext, self.cov.na, p_f,
                                 track.timestamps, track.uvs, clone_pos)

    def msckf_update(self, tracks, report=None):
        """Nullspace-projected update with a batch of tracks."""
        report = report if report is not None else UpdateReport()
        if not tracks:
            return report
        clone_pos = self.state.clone_index_map()
        sig2 = self.config.sigma_pixel**2
        blocks = []
        for track in tracks:
            if len(track) < max(2, self.config.min_track_length):
                report.fail("short_track")
                continue
            try:
                p_f, _ = triangulate(track, self.state.clones, self.ext)
                H_x, H_f, r = self._feature_system(track, p_f, clone_pos)
                H_o, r_o, R_o = nullspace_project(H_x, H_f, r, sig2 * np.eye(len(r)))
            except (TriangulationError, NonPositiveDepth, RankDeficientFeature) as exc:
                report.fail(type(exc).__name__)
                continue
            if not self._gate_ok(H_o, r_o, R_o):
                report.fail("chi2")
                continue
            blocks.append((H_o, r_o, R_o))
        if not blocks:
            return report
        H = np.vstack([b[0] for b in blocks])
        r = np.concatenate([b[1] for b in blocks])
        R = _block_diag([b[2] for b in blocks])
        try:
            schmidt_update(self.state, self.cov, LinearSystem(H, r, R))
        except (SingularInnovation, np.linalg.LinAlgError):
            report.fail("singular_msckf")
            return report
        report.features_used["msckf"] += len(blocks)
        report.rows["msckf"] += len(r)
        return report

    def initialize_slam_feature(self, track, report=None):
        """Delayed initialization of a SLAM feature from its whole track.

        With ``slam_init_prior=None`` the feature is initialized in the
        infinite-prior limit: a QR split of ``H_f`` gives three rows that fix
        the feature and the remaining rows update the augmented state. A
        numeric prior instead augments with ``prior * I`` and runs one EKF
        update with every row.
        """
        p_f, _ = triangulate(track, self.state.clones, self.ext)
        clone_pos = self.state.clone_index_map()
        na = self.cov.na
        sig2 = self.config.sigma_pixel**2
        H_x, H_f, r = self._feature_system(track, p_f, clone_pos)
        prior = self.config.slam_init_prior
        if prior is None:
            H_x, r, rows = self._add_feature_exact(track.feature_id, p_f, H_x, H_f, r, sig2)
        else:
            add_active_feature(self.state, self.cov, FeatureState(track.feature_id, p_f),
                               np.zeros((na, FEAT_DIM)), prior * np.eye(FEAT_DIM))
            H_x = np.hstack([H_x, H_f])
            rows = len(r)
        if len(r):
            try:
                schmidt_update(self.state, self.cov, LinearSystem(H_x, r, sig2 * np.eye(len(r))))
            except (SingularInnovation, np.linalg.LinAlgError):
                marginalize_active_feature(self.state, self.cov, track.feature_id)
                raise
        if report is not None:
            report.features_used["slam_init"] += 1
            report.rows["slam_init"] += rows
        return track.feature_id

    def _add_feature_exact(self, fid, p_f, H_x, H_f, r, sig2):
        """Augment with ``df = U^-1 (r_1 - H_1 dx - n_1)``; return the rest."""
        n_rows = len(r)
        if n_rows < FEAT_DIM:
            raise RankDeficientFeature(f"{n_rows} rows cannot fix a feature")
        Q, U = np.linalg.qr(H_f, mode="complete")
        U = U[:FEAT_DIM]
        d = np.abs(np.diag(U))
        if d.min() <= 1e-10 * max(d.max(), 1e-300):
            raise RankDeficientFeature("feature Jacobian is rank deficient")
        Qt_H = Q.T @ H_x
        Qt_r = Q.T @ r
        U_inv = solve_triangular(U, np.eye(FEAT_DIM))
        A = U_inv @ Qt_H[:FEAT_DIM]                     # df depends on -A dx
        cov = self.cov
        cross = -(cov.P_AA @ A.T)
        block = A @ cov.P_AA @ A.T + sig2 * U_inv @ U_inv.T
        as_rows = -(A @ cov.P_AS)
        add_active_feature(self.state, cov, FeatureState(fid, p_f + U_inv @ Qt_r[:FEAT_DIM]),
                           cross, 0.5 * (block + block.T), as_rows)
        H_rest = np.zeros((n_rows - FEAT_DIM, cov.na))
        H_rest[:, :H_x.shape[1]] = Qt_H[FEAT_DIM:]
        return H_rest, Qt_r[FEAT_DIM:], n_rows

    def slam_update(self, observations, report):
        state, ext = self.state, self.ext
        newest = state.clones[0]
        sig2 = self.config.sigma_pixel**2
        na = self.cov.na
        base = state.clone_offset(len(state.clones))
        slot = {f.id: i for i, f in enumerate(state.active_features)}
        Hs, rs = [], []
        for b in observations:
            i = slot[b.feature_id]
            f_off = base + FEAT_DIM * i
            p_f = state.active_features[i].position
            try:
                zhat, J = predict(p_f, newest, ext)
            except NonPositiveDepth:
                report.fail("slam_depth")
                continue
            H = np.zeros((2, na))
            off = state.clone_offset(0)
            H[:, off:off + 3] = J.H_theta
            H[:, off + 3:off + 6] = J.H_p
            H[:, f_off:f_off + 3] = J.H_f
            r = np.array([b.u - zhat[0], b.v - zhat[1]])
            if not self._gate_ok(H, r, sig2 * np.eye(2)):
                report.fail("chi2")
                continue
            Hs.append(H)
            rs.append(r)
        if not Hs:
            return
        H = np.vstack(Hs)
        r = np.concatenate(rs)
        try:
            schmidt_update(state, self.cov, LinearSystem(H, r, sig2 * np.eye(len(r))))
        except (SingularInnovation, np.linalg.LinAlgError):
            report.fail("singular_slam")
            return
        report.features_used["slam"] += len(Hs)
        report.rows["slam"] += len(r)

    def map_update(self, pending, report):
        """Schmidt update with (clone timestamp, Bearing, schmidt id) entries.

        At most ``max_update_rows`` rows are used; the rest are deferred.
        """
        state, ext = self.state, self.ext
        clone_pos = state.clone_index_map()
        schmidt_pos = {f.id: i for i, f in enumerate(state.schmidt_features)}
        sig2 = self.config.sigma_pixel**2
        na = self.cov.na
        cap = self.config.max_update_rows
        rows_H, rows_HS, rows_r, cols = [], [], [], []
        used = 0
        leftover = []
        for t, b, fid in pending:
            if t not in clone_pos or fid not in schmidt_pos:
                report.fail("map_stale")
                continue
            if used + 2 > cap:
                leftover.append((t, b, fid))
                continue
            ci = clone_pos[t]
            clone = state.clones[ci]
            p_f = state.schmidt_features[schmidt_pos[fid]].position
            try:
                zhat, J = predict(p_f, clone, ext)
            except NonPositiveDepth:
                report.fail("map_depth")
                continue
            H = np.zeros((2, na))
            off = state.clone_offset(ci)
            H[:, off:off + 3] = J.H_theta
            H[:, off + 3:off + 6] = J.H_p
            r = np.array([b.u - zhat[0], b.v - zhat[1]])
            if self.config.chi2_gate:
                s_off = FEAT_DIM * schmidt_pos[fid]
                Pff = self.cov.P_SS[s_off:s_off + 3, s_off:s_off + 3]
                Paf = self.cov.P_AS[:, s_off:s_off + 3]
                S = H @ self.cov.P_AA @ H.T + J.H_f @ Pff @ J.H_f.T \
                    + H @ Paf @ J.H_f.T + J.H_f @ Paf.T @ H.T + sig2 * np.eye(2)
                if float(r @ np.linalg.solve(S, r)) > chi2.ppf(self.config.chi2_quantile, 2):
                    report.fail("chi2")
                    continue
            rows_H.append(H)
            rows_HS.append(J.H_f)
            rows_r.append(r)
            cols.append(FEAT_DIM * schmidt_pos[fid])
            used += 2
        self.deferred = leftover
        report.deferred = len(leftover)
        if not rows_H:
            return
        k = len(rows_H)
        H_A = np.vstack(rows_H)
        H_S = np.zeros((2 * k, FEAT_DIM * k))
        for j, Hf in enumerate(rows_HS):
            H_S[2 * j:2 * j + 2, FEAT_DIM * j:FEAT_DIM * j + 3] = Hf
        index = np.concatenate([np.arange(c, c + FEAT_DIM) for c in cols])
        r = np.concatenate(rows_r)
        try:
            schmidt_update(state, self.cov, LinearSystem(H_A, r, sig2 * np.eye(2 * k), H_S, index))
        except (SingularInnovation, np.linalg.LinAlgError):
            report.fail("singular_map")
            return
        report.features_used["map"] += k
        report.rows["map"] += 2 * k

    # -- per image -----------------------------------------------------------

    def _evict_oldest_map_feature(self):
        oldest = min(self._map_seq, key=self._map_seq.get)
        marginalize_schmidt_feature(self.state, self.cov, oldest)
        del self._map_seq[oldest]

    def process_image(self, observations, assoc_result=None):
        """One camera frame: clone, update, manage. Propagation must be done."""
        t_start = time.perf_counter()
        cfg, state = self.config, self.state
        report = UpdateReport(t=state.imu.timestamp)
        assoc_result = assoc_result if assoc_result is not None else assoc.AssocResult()

        augment_clone(state, self.cov)
        t_new = state.clones[0].timestamp
        active_ids = state.active_ids()
        schmidt_ids = state.schmidt_ids()
        to_map = assoc_result.by_observation()

        seen = set()
        slam_obs, map_obs = [], []
        for b in observations:
            fid = b.feature_id
            seen.add(fid)
            if fid in active_ids:
                slam_obs.append(b)
            elif fid in to_map:
                map_obs.append((t_new, b, to_map[fid]))
            else:
                self.tracks.setdefault(fid, FeatureTrack(fid)).add(t_new, b.uv)

        lost = [tr for fid, tr in self.tracks.items() if tr.timestamps[-1] != t_new]
        for tr in lost:
            del self.tracks[tr.feature_id]

        # tracks anchored on the clone about to leave the window
        promote, spanning = [], []
        if len(state.clones) >= cfg.max_clones:
            t_old = state.clones[-1].timestamp
            slots = cfg.max_slam_features - len(active_ids)
            for fid in sorted(self.tracks):
                tr = self.tracks[fid]
                if tr.timestamps[0] != t_old:
                    continue
                if len(promote) < slots and fid not in schmidt_ids:
                    promote.append(tr)
                else:
                    spanning.append(tr)
            for tr in promote + spanning:
                del self.tracks[tr.feature_id]

        self.msckf_update(lost + spanning, report)

        for tr in promote:
            try:
                self.initialize_slam_feature(tr, report)
            except (TriangulationError, NonPositiveDepth, RankDeficientFeature,
                    SingularInnovation, np.linalg.LinAlgError) as exc:
                report.fail("slam_init_" + type(exc).__name__)
                self.msckf_update([tr], report)

        self.slam_update(slam_obs, report)
        self.map_update(self.deferred + map_obs, report)
        t_mgmt = time.perf_counter()
        report.update_s = t_mgmt - t_start

        # management
        # full_slam keeps every feature in the active state
        lost_slam = [] if cfg.mode == "full_slam" else [
            f.id for f in state.active_features if f.id not in seen]
        for fid in lost_slam:
            if cfg.mode == "sevis":
                if len(state.schmidt_features) >= cfg.max_map_features:
                    self._evict_oldest_map_feature()
                move_feature_to_schmidt(state, self.cov, fid)
                self._map_seq[fid] = self._seq
                self._seq += 1
            else:
                marginalize_active_feature(state, self.cov, fid)

        if len(state.clones) >= cfg.max_clones:
            marginalize_clone(state, self.cov, len(state.clones) - 1)

        if cfg.max_map_features:
            self.keyframes.maintain(state, observations, t_new)
        report.mgmt_s = time.perf_counter() - t_mgmt
        report.n_schmidt = len(state.schmidt_features)
        return report


def _block_diag(mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i:i + k, i:i + k] = m
        i += k
    return out
