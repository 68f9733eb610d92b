"""Perspective camera model, measurement Jacobians and triangulation."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from sevis.geometry import identity_quat, quat_to_rot, skew

DEPTH_MIN = 0.05


class NonPositiveDepth(ValueError):
    pass


class TriangulationError(RuntimeError):
    pass


class InsufficientBaseline(TriangulationError):
    pass


class DivergedRefinement(TriangulationError):
    pass


class BehindCamera(TriangulationError):
    pass


@dataclass(frozen=True)
class Extrinsics:
    """Camera-IMU calibration: ``p_C = C(q_CI) p_I + p_CI``."""

    q_CI: np.ndarray = field(default_factory=identity_quat)
    p_CI: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @cached_property
    def R_CI(self):
        return quat_to_rot(self.q_CI)


@dataclass
class Bearing:
    u: float
    v: float
    feature_id: int
    timestamp: float

    @property
    def uv(self):
        return np.array([self.u, self.v])


@dataclass
class MeasJacobian:
    """2x3 blocks for one observation, wrt clone orientation, clone position
    and the feature position."""

    H_theta: np.ndarray
    H_p: np.ndarray
    H_f: np.ndarray


@dataclass
class FeatureTrack:
    feature_id: int
    timestamps: list = field(default_factory=list)
    uvs: list = field(default_factory=list)

    def add(self, timestamp, uv):
        self.timestamps.append(timestamp)
        self.uvs.append(np.asarray(uv, dtype=float))

    def __len__(self):
        return len(self.timestamps)


@dataclass
class TriangulationReport:
    cost: float
    iterations: int
    baseline_ratio: float


def to_camera(p_global, clone, ext):
    """Point in the camera frame of ``clone``."""
    R_IG = quat_to_rot(clone.q)
    return ext.R_CI @ (R_IG @ (p_global - clone.p)) + ext.p_CI


def project(p_global, clone, ext, feature_id=-1):
    pc = to_camera(p_global, clone, ext)
    if pc[2] <= DEPTH_MIN:
        raise NonPositiveDepth(f"depth {pc[2]:.3g} m below {DEPTH_MIN}")
    return Bearing(pc[0] / pc[2], pc[1] / pc[2], feature_id, clone.timestamp)


def projection_jacobian(p_cam):
    x, y, z = p_cam
    if z <= DEPTH_MIN:
        raise NonPositiveDepth(f"depth {z:.3g} m below {DEPTH_MIN}")
    return np.array([[z, 0.0, -x], [0.0, z, -y]]) / (z * z)


def predict(p_global, clone, ext):
    """Predicted ``(u, v)`` and its Jacobian blocks in one pass."""
    R_IG = quat_to_rot(clone.q)
    p_I = R_IG @ (p_global - clone.p)
    p_cam = ext.R_CI @ p_I + ext.p_CI
    A = projection_jacobian(p_cam) @ ext.R_CI
    AR = A @ R_IG
    return p_cam[:2] / p_cam[2], MeasJacobian(A @ skew(p_I), -AR, AR)


def measurement_jacobians(p_global, clone, ext):
    return predict(p_global, clone, ext)[1]


def _camera_poses(track, clones, ext):
    """Global-to-camera rotations and camera centres for the track's views."""
    by_time = {c.timestamp: c for c in clones}
    R_CI, p_CI = ext.R_CI, ext.p_CI
    Rs, centres = [], []
    for t in track.timestamps:
        c = by_time[t]
        R_CG = R_CI @ quat_to_rot(c.q)
        Rs.append(R_CG)
        # p_C = R_CG (p - p_I) + p_CI = R_CG (p - centre)
        centres.append(c.p - R_CG.T @ p_CI)
    return np.array(Rs), np.array(centres)


def triangulate(track, clones, ext, max_iters=20, tol=1e-10, baseline_ratio_min=0.02):
    """Linear seed plus Gauss-Newton refinement of a global point.

    Every timestamp in ``track`` must have a matching clone.
    """
    if len(track) < 2:
        raise InsufficientBaseline("need at least two observations")
    Rs, centres = _camera_poses(track, clones, ext)
    Z = np.array(track.uvs)
    diffs = centres[:, None, :] - centres[None, :, :]
    baseline = float(np.sqrt((diffs**2).sum(-1).max()))
    if baseline < 1e-9:
        raise InsufficientBaseline("zero baseline")

    # u r3 - r1, v r3 - r2 applied to (p - centre)
    A = np.concatenate([Z[:, 0:1] * Rs[:, 2] - Rs[:, 0], Z[:, 1:2] * Rs[:, 2] - Rs[:, 1]])
    b = np.concatenate([(A[:len(Z)] * centres).sum(1), (A[len(Z):] * centres).sum(1)])
    p, *_ = np.linalg.lstsq(A, b, rcond=None)

    def residual(p):
        pc = np.einsum("nij,nj->ni", Rs, p - centres)
        if np.any(pc[:, 2] <= DEPTH_MIN):
            raise BehindCamera("triangulated point behind a camera")
        return Z - pc[:, :2] / pc[:, 2:3], pc

    r, pc = residual(p)
    cost = float((r**2).sum())
    for it in range(1, max_iters + 1):
        x, y, z = pc.T
        # d(pc_xy / z)/d pc, chained with R_CG
        Hp = np.zeros((len(Z), 2, 3))
        Hp[:, 0, 0] = 1.0 / z
        Hp[:, 0, 2] = -x / z**2
        Hp[:, 1, 1] = 1.0 / z
        Hp[:, 1, 2] = -y / z**2
        J = np.einsum("nij,njk->nik", Hp, Rs).reshape(-1, 3)
        step = np.linalg.solve(J.T @ J, J.T @ r.reshape(-1))
        p_new = p + step
        r_new, pc_new = residual(p_new)
        cost_new = float((r_new**2).sum())
        if cost_new > cost * (1.0 + 1e-9) + 1e-20:
            raise DivergedRefinement(f"cost increased {cost:.3g} -> {cost_new:.3g}")
        converged = cost - cost_new < tol
        p, r, pc, cost = p_new, r_new, pc_new, cost_new
        if converged:
            break
    else:
        raise DivergedRefinement(f"no convergence in {max_iters} iterations")

    depth = float(pc[:, 2].mean())
    ratio = baseline / depth
    if ratio < baseline_ratio_min:
        raise InsufficientBaseline(f"baseline/depth {ratio:.3g} below {baseline_ratio_min}")
    return p, TriangulationReport(cost, it, ratio)
