"""IMU mean propagation, error-state transition and compounding.

Mean integration holds each measurement constant over its interval:
orientation is integrated exactly for constant angular rate, velocity and
position use the midpoint of the start/end body-to-global rotations.
"""

from dataclasses import dataclass

import numpy as np

from sevis.geometry import quat_exp, quat_multiply, quat_to_rot, right_jacobian, skew
from sevis.state import BA, BG, IMU_DIM, POS, THETA, VEL, ImuState

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class ImuSample:
    omega: np.ndarray  # rad/s, body frame
    accel: np.ndarray  # m/s^2, specific force in body frame
    timestamp: float


@dataclass
class NoiseParams:
    """Continuous-time IMU noise densities."""

    sigma_g: float   # rad/s/sqrt(Hz)
    sigma_wg: float  # rad/s^2/sqrt(Hz)
    sigma_a: float   # m/s^2/sqrt(Hz)
    sigma_wa: float  # m/s^3/sqrt(Hz)

    def __post_init__(self):
        for name in ("sigma_g", "sigma_wg", "sigma_a", "sigma_wa"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass
class CompoundedTransition:
    Phi: np.ndarray
    Q: np.ndarray

    @classmethod
    def identity(cls, dim=IMU_DIM):
        return cls(np.eye(dim), np.zeros((dim, dim)))


def _integrate(imu, omega_hat, accel_hat, dt, gravity):
    """Shared mean integration; returns the new state and intermediates."""
    dq = quat_exp(omega_hat * dt)
    dR = quat_to_rot(dq)
    R0 = quat_to_rot(imu.q)
    q1 = quat_multiply(dq, imu.q)
    R1 = quat_to_rot(q1)
    a_global = 0.5 * (R0.T + R1.T) @ accel_hat + gravity
    v1 = imu.v + a_global * dt
    p1 = imu.p + imu.v * dt + 0.5 * a_global * dt * dt
    out = ImuState(q1, imu.bg.copy(), v1, imu.ba.copy(), p1, imu.timestamp + dt)
    return out, dR, R0, R1


def propagate_mean(imu, sample, dt, gravity=GRAVITY):
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    omega_hat = sample.omega - imu.bg
    accel_hat = sample.accel - imu.ba
    return _integrate(imu, omega_hat, accel_hat, dt, gravity)[0]


def error_state_jacobians(imu, sample, dt, noise, gravity=GRAVITY):
    """One-step IMU error transition ``Phi`` and discrete noise ``Q``.

    Returns ``(Phi, Q, imu_next)`` so callers integrate the mean only once.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    omega_hat = sample.omega - imu.bg
    accel_hat = sample.accel - imu.ba
    nxt, dR, R0, R1 = _integrate(imu, omega_hat, accel_hat, dt, gravity)

    Jr = right_jacobian(omega_hat * dt)
    ax = skew(accel_hat)
    Phi = np.eye(IMU_DIM)
    Phi[THETA, THETA] = dR
    Phi[THETA, BG] = -Jr * dt
    Phi[VEL, THETA] = -0.5 * dt * (R0.T @ ax + R1.T @ ax @ dR)
    Phi[VEL, BG] = 0.5 * dt * dt * (R1.T @ ax @ Jr)
    Phi[VEL, BA] = -0.5 * dt * (R0.T + R1.T)
    Phi[POS, THETA] = 0.5 * dt * Phi[VEL, THETA]
    Phi[POS, BG] = 0.5 * dt * Phi[VEL, BG]
    Phi[POS, VEL] = dt * np.eye(3)
    Phi[POS, BA] = 0.5 * dt * Phi[VEL, BA]

    # continuous noise Jacobian for [n_g, n_wg, n_a, n_wa]
    G = np.zeros((IMU_DIM, 12))
    G[THETA, 0:3] = -np.eye(3)
    G[BG, 3:6] = np.eye(3)
    G[VEL, 6:9] = -R0.T
    G[BA, 9:12] = np.eye(3)
    sig = np.repeat([noise.sigma_g**2, noise.sigma_wg**2, noise.sigma_a**2, noise.sigma_wa**2], 3)
    Q = (G * sig) @ G.T * dt
    Q = 0.5 * (Q + Q.T)
    return Phi, Q, nxt


def compound(ct, step):
    Phi_k, Q_k = step
    if Phi_k.shape != ct.Phi.shape or Q_k.shape != ct.Q.shape:
        raise ValueError(f"shape mismatch: {Phi_k.shape} vs {ct.Phi.shape}")
    return CompoundedTransition(Phi_k @ ct.Phi, Phi_k @ ct.Q @ Phi_k.T + Q_k)


def propagate_covariance(cov, ct):
    """Apply ``ct`` to the active block in place; ``P_SS`` is untouched.

    ``ct`` may span the whole active state or only the leading IMU block, in
    which case clone and feature rows transition with identity.
    """
    Phi, Q = ct.Phi, ct.Q
    k = Phi.shape[0]
    na = cov.na
    if k != na and k != IMU_DIM:
        raise ValueError(f"transition of size {k} does not fit active dim {na}")
    P = cov.P_AA
    if k == na:
        P[...] = Phi @ P @ Phi.T + Q
        if cov.ns:
            cov.P_AS[...] = Phi @ cov.P_AS
    else:
        top = Phi @ P[:k]
        P[:k] = top
        P[:, :k] = P[:, :k] @ Phi.T
        P[:k, :k] += Q
        if cov.ns:
            cov.P_AS[:k] = Phi @ cov.P_AS[:k]
    cov.symmetrize_active()
    return cov
