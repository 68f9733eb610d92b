"""Ground-truth world and sensor synthesis.

The platform flies a horizontal circle inside a cylindrical arena whose wall
carries the landmarks. The IMU frame has x along the direction of travel,
y toward the circle centre and z up; the camera looks along the direction
of travel.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from sevis.camera import Bearing, Extrinsics
from sevis.geometry import quat_to_rot, rot_to_quat
from sevis.propagation import GRAVITY, ImuSample, NoiseParams
from sevis.state import ImuState

STREAMS = ("imu", "bias", "pixel", "assoc", "init", "landmarks")


def _camera_extrinsics(lever_arm=(0.1, 0.0, 0.05)):
    # camera x = -imu y, camera y = -imu z, camera z = imu x
    R_CI = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    p_IC = np.asarray(lever_arm, dtype=float)
    return Extrinsics(rot_to_quat(R_CI), -R_CI @ p_IC)


@dataclass
class SimConfig:
    # Monte-Carlo parameters (datasheet units)
    gyro_arw_deg_sqrt_hr: float = 0.4
    gyro_rrw_deg_s_sqrt_hr: float = 0.02
    accel_vrw_m_s_sqrt_hr: float = 0.03
    accel_rrw_mg_sqrt_hr: float = 0.25
    imu_rate: float = 100.0
    cam_rate: float = 5.0
    bearing_sigma_deg: float = 0.17
    clone_window: int = 15
    loop_period: float = 32.0
    # arena
    circle_radius: float = 5.0
    circle_height: float = 1.5
    cylinder_radius: float = 7.0
    cylinder_height: float = 4.0
    n_landmarks: int = 300
    fov_deg: float = 90.0
    max_depth: float = 20.0
    duration: float = 320.0
    seed: int = 0
    motion: str = "circle"  # or "static"
    noise_scale: float = 1.0
    lever_arm: tuple = (0.1, 0.0, 0.05)
    g: float = 9.81

    def __post_init__(self):
        if not (self.imu_rate > 0 and self.cam_rate > 0):
            raise ValueError("rates must be positive")
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("cam_rate must divide imu_rate evenly")

    @property
    def imu_per_cam(self):
        return int(round(self.imu_rate / self.cam_rate))

    @property
    def noise(self):
        """Nominal continuous-time densities in SI units (``noise_scale``
        only affects the synthesized measurements)."""
        return NoiseParams(
            sigma_g=math.radians(self.gyro_arw_deg_sqrt_hr) / 60.0,
            sigma_wg=math.radians(self.gyro_rrw_deg_s_sqrt_hr) / 60.0,
            sigma_a=self.accel_vrw_m_s_sqrt_hr / 60.0,
            sigma_wa=self.accel_rrw_mg_sqrt_hr * 1e-3 * self.g / 60.0,
        )

    @property
    def sigma_uv(self):
        return math.tan(math.radians(self.bearing_sigma_deg))

    @property
    def gravity(self):
        return np.array([0.0, 0.0, -self.g])


@dataclass
class Truth:
    q: np.ndarray       # global -> imu
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray   # body rate, imu frame
    accel: np.ndarray   # global-frame acceleration

    def imu_state(self, t):
        return ImuState(self.q.copy(), np.zeros(3), self.v.copy(), np.zeros(3), self.p.copy(), t)


def _streams(seed):
    """Independent Philox streams, one per noise source."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(ss)) for name, ss in zip(STREAMS, children)}


@dataclass
class SimWorld:
    config: SimConfig
    landmarks: np.ndarray = None
    ext: Extrinsics = None
    rng: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.config
        self.rng = _streams(cfg.seed)
        self.ext = _camera_extrinsics(cfg.lever_arm)
        if self.landmarks is None:
            g = self.rng["landmarks"]
            ang = g.uniform(0.0, 2.0 * np.pi, cfg.n_landmarks)
            z = g.uniform(0.0, cfg.cylinder_height, cfg.n_landmarks)
            rc = cfg.cylinder_radius
            self.landmarks = np.column_stack([rc * np.cos(ang), rc * np.sin(ang), z])
        self._bg = np.zeros(3)
        self._ba = np.zeros(3)
        self._tan_half_fov = math.tan(math.radians(cfg.fov_deg) / 2.0)

    @property
    def n_imu(self):
        return int(round(self.config.duration * self.config.imu_rate))

    def truth_at(self, t):
        cfg = self.config
        if not -1e-9 <= t <= cfg.duration + 1e-9:
            raise ValueError(f"t={t} outside [0, {cfg.duration}]")
        if cfg.motion == "static":
            p = np.array([0.0, 0.0, cfg.circle_height])
            return Truth(np.array([0.0, 0.0, 0.0, 1.0]), p, np.zeros(3), np.zeros(3), np.zeros(3))
        w = 2.0 * np.pi / cfg.loop_period
        r = cfg.circle_radius
        c, s = math.cos(w * t), math.sin(w * t)
        p = np.array([r * c, r * s, cfg.circle_height])
        v = np.array([-r * w * s, r * w * c, 0.0])
        a = np.array([-r * w * w * c, -r * w * w * s, 0.0])
        # body axes expressed in global: forward, toward centre, up
        R_GI = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 1.0]])
        q = rot_to_quat(R_GI.T)
        return Truth(q, p, v, np.array([0.0, 0.0, w]), a)

    def gen_imu(self, t, dt=None):
        """IMU sample at ``t``; call in time order, it advances the bias walks."""
        cfg = self.config
        dt = dt if dt is not None else 1.0 / cfg.imu_rate
        tr = self.truth_at(t)
        R_IG = quat_to_rot(tr.q)
        f = R_IG @ (tr.accel - cfg.gravity)
        nz = cfg.noise
        k = cfg.noise_scale
        g_imu = self.rng["imu"]
        omega = tr.omega + self._bg + k * nz.sigma_g / math.sqrt(dt) * g_imu.standard_normal(3)
        accel = f + self._ba + k * nz.sigma_a / math.sqrt(dt) * g_imu.standard_normal(3)
        g_bias = self.rng["bias"]
        self._bg = self._bg + k * nz.sigma_wg * math.sqrt(dt) * g_bias.standard_normal(3)
        self._ba = self._ba + k * nz.sigma_wa * math.sqrt(dt) * g_bias.standard_normal(3)
        return ImuSample(omega, accel, t)

    @property
    def biases(self):
        return self._bg.copy(), self._ba.copy()

    def gen_bearings(self, t):
        """Noisy normalized image coordinates of every visible landmark."""
        cfg = self.config
        tr = self.truth_at(t)
        R_CG = self.ext.R_CI @ quat_to_rot(tr.q)
        pc = (self.landmarks - tr.p) @ R_CG.T + self.ext.p_CI
        z = pc[:, 2]
        ok = (z > 0.1) & (z < cfg.max_depth)
        uv = np.zeros((len(pc), 2))
        uv[ok] = pc[ok, :2] / z[ok, None]
        ok &= (np.abs(uv) <= self._tan_half_fov).all(axis=1)
        ids = np.flatnonzero(ok)
        # one draw per landmark keeps streams aligned regardless of visibility
        noise = cfg.noise_scale * cfg.sigma_uv * self.rng["pixel"].standard_normal((len(pc), 2))
        uv = uv + noise
        return [Bearing(float(uv[i, 0]), float(uv[i, 1]), int(i), t) for i in ids]

    def camera_times(self):
        cfg = self.config
        n = int(round(cfg.duration * cfg.cam_rate))
        return [k / cfg.cam_rate for k in range(1, n + 1)]


def export_truth_csv(world, path, times=None):
    times = times if times is not None else [0.0] + world.camera_times()
    with open(path, "w") as fh:
        fh.write("t,px,py,pz,qx,qy,qz,qw\n")
        for t in times:
            tr = world.truth_at(t)
            fh.write(",".join(repr(float(x)) for x in (t, *tr.p, *tr.q)) + "\n")
