"""Fast runtime invariant suite behind ``sevis check``.

Each check builds a small random problem, compares the block-structured
code path against a dense construction, and returns ``(ok, detail)``.
"""

from dataclasses import dataclass

import numpy as np

from sevis.camera import Extrinsics, measurement_jacobians, project
from sevis.estimator import LinearSystem, nullspace_project, schmidt_update
from sevis.geometry import normalize, quat_to_rot, small_angle_update
from sevis.propagation import (
    CompoundedTransition,
    ImuSample,
    NoiseParams,
    compound,
    error_state_jacobians,
    propagate_covariance,
)
from sevis.state import (
    ClonePose,
    FeatureState,
    ImuState,
    PartitionedCovariance,
    SevisState,
    add_active_feature,
    augment_clone,
    marginalize_clone,
    move_feature_to_schmidt,
)


def _psd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + 1e-3 * np.eye(n)


def check_schmidt_oracle(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        na, ns, m = int(rng.integers(1, 13)), 3 * int(rng.integers(0, 4)), int(rng.integers(1, 7))
        P = _psd(rng, na + ns)
        H = rng.standard_normal((m, na + ns))
        r = rng.standard_normal(m)
        R = 0.1 * np.eye(m)
        cov = PartitionedCovariance.from_blocks(P[:na, :na], P[:na, na:], P[na:, na:])
        P_SS0 = cov.P_SS.copy()
        dx = schmidt_update(None, cov, LinearSystem.dense(H[:, :na], H[:, na:], r, R))
        # dense EKF with the Schmidt rows of the gain zeroed
        K = P @ H.T @ np.linalg.inv(H @ P @ H.T + R)
        K[na:] = 0.0
        ref = P - K @ H @ P
        worst = max(worst, np.abs(dx - (K @ r)[:na]).max(), np.abs(cov.P_AA - ref[:na, :na]).max(),
                    np.abs(cov.P_AS - ref[:na, na:]).max() if ns else 0.0)
        if not np.array_equal(cov.P_SS, P_SS0):
            return False, "P_SS changed"
    return worst < 1e-10, f"max deviation {worst:.2e}"


def check_nullspace_oracle(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        nx, n = int(rng.integers(3, 9)), int(rng.integers(3, 7))
        H_x = rng.standard_normal((2 * n, nx))
        H_f = rng.standard_normal((2 * n, 3))
        r = rng.standard_normal(2 * n)
        R = 0.01 * np.eye(2 * n)
        P = _psd(rng, nx)
        H_o, r_o, R_o = nullspace_project(H_x, H_f, r, R)
        dx = P @ H_o.T @ np.linalg.solve(H_o @ P @ H_o.T + R_o, r_o)
        # information form with the feature Schur-marginalized
        Ri = np.linalg.inv(R)
        A = Ri - Ri @ H_f @ np.linalg.solve(H_f.T @ Ri @ H_f, H_f.T @ Ri)
        dx_ref = np.linalg.solve(np.linalg.inv(P) + H_x.T @ A @ H_x, H_x.T @ A @ r)
        worst = max(worst, np.abs(dx - dx_ref).max())
    return worst < 1e-9, f"max state delta {worst:.2e}"


def check_measurement_jacobians(rng, trials=50, h=1e-6):
    worst = 0.0
    for _ in range(trials):
        clone = ClonePose(normalize(rng.standard_normal(4)), rng.standard_normal(3), 0.0)
        ext = Extrinsics(normalize(rng.standard_normal(4)), 0.1 * rng.standard_normal(3))
        pc = np.array([*rng.uniform(-0.5, 0.5, 2), rng.uniform(1.0, 8.0)])
        p = quat_to_rot(clone.q).T @ (ext.R_CI.T @ (pc - ext.p_CI)) + clone.p
        J = measurement_jacobians(p, clone, ext)

        def fd(f):
            return np.column_stack([(f(h * e) - f(-h * e)) / (2 * h) for e in np.eye(3)])

        blocks = (
            (J.H_theta, fd(lambda d: project(p, ClonePose(small_angle_update(clone.q, d), clone.p, 0), ext).uv)),
            (J.H_p, fd(lambda d: project(p, ClonePose(clone.q, clone.p + d, 0), ext).uv)),
            (J.H_f, fd(lambda d: project(p + d, clone, ext).uv)),
        )
        worst = max(worst, *(np.abs(a - b).max() for a, b in blocks))
    return worst < 1e-5, f"max |analytic - fd| {worst:.2e}"


def check_compounding(rng, trials=20, steps=5):
    noise = NoiseParams(1e-3, 1e-4, 1e-2, 1e-3)
    worst = 0.0
    for _ in range(trials):
        imu = ImuState(normalize(rng.standard_normal(4)), 0.01 * rng.standard_normal(3),
                       rng.standard_normal(3), 0.01 * rng.standard_normal(3), rng.standard_normal(3))
        P = _psd(rng, 27)
        seq = PartitionedCovariance.from_blocks(P[:21, :21], P[:21, 21:], P[21:, 21:])
        batch = seq.copy()
        ct = CompoundedTransition.identity()
        for _ in range(steps):
            sample = ImuSample(rng.standard_normal(3), rng.standard_normal(3) + [0, 0, 9.81], 0.0)
            Phi, Q, imu = error_state_jacobians(imu, sample, 0.01, noise)
            propagate_covariance(seq, CompoundedTransition(Phi, Q))
            ct = compound(ct, (Phi, Q))
        propagate_covariance(batch, ct)
        worst = max(worst, np.abs(seq.full() - batch.full()).max() / np.abs(seq.full()).max())
    return worst < 1e-12, f"max relative deviation {worst:.2e}"


def check_management(rng, ops=200):
    """Random management sequence; each step must be an exact permutation/submatrix."""
    state = SevisState(max_clones=4)
    cov = PartitionedCovariance(_psd(rng, 15), n_max=64)
    fid = 0
    for _ in range(ops):
        before = cov.full()
        kind = rng.integers(4)
        if kind == 0 and len(state.clones) < state.max_clones:
            state.imu.timestamp += 1.0
            augment_clone(state, cov)
            idx = np.r_[0:3, 12:15]
            if not np.array_equal(cov.P_AA[15:21, 15:21], before[np.ix_(idx, idx)]):
                return False, "clone block differs from the IMU pose block"
        elif kind == 1 and state.clones:
            k = int(rng.integers(len(state.clones)))
            off = state.clone_offset(k)
            marginalize_clone(state, cov, k)
            keep = np.r_[0:off, off + 6:before.shape[0]]
            if not np.array_equal(cov.full(), before[np.ix_(keep, keep)]):
                return False, "clone marginalization is not a submatrix"
        elif kind == 2 and len(state.active_features) < 3:
            cross = 0.01 * rng.standard_normal((cov.na, 3))
            add_active_feature(state, cov, FeatureState(fid, np.zeros(3)), cross, np.eye(3))
            fid += 1
        elif kind == 3 and state.active_features and len(state.schmidt_features) < 60:
            f = state.active_features[int(rng.integers(len(state.active_features)))]
            move_feature_to_schmidt(state, cov, f.id)
            # a pure permutation keeps the multiset of variances
            if not np.array_equal(np.sort(np.diag(cov.full())), np.sort(np.diag(before))):
                return False, "move to Schmidt is not a permutation"
        if not np.array_equal(cov.full(), cov.full().T):
            return False, "covariance lost symmetry"
    return True, f"{ops} operations, {len(state.schmidt_features)} Schmidt features"


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


CHECKS = (
    ("schmidt update vs dense zero-gain EKF", check_schmidt_oracle),
    ("nullspace projection vs Schur marginalization", check_nullspace_oracle),
    ("measurement Jacobians vs finite differences", check_measurement_jacobians),
    ("compounded vs sequential propagation", check_compounding),
    ("management permutation invariants", check_management),
)


def run_checks(seed=0):
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(np.random.default_rng(seed))
        except Exception as exc:  # report, do not crash the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
