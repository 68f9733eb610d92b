"""JPL unit-quaternion and SO(3) helpers.

Quaternions are stored scalar-last as ``[qx, qy, qz, qw]``. A quaternion
``q = {}^L_G q`` rotates vectors from the global frame into the local frame:
``p_L = quat_to_rot(q) @ p_G``. Composition follows the JPL convention, so
``quat_to_rot(quat_multiply(q1, q2)) == quat_to_rot(q1) @ quat_to_rot(q2)``.

Orientation errors are left-multiplicative: ``q = dq(dtheta) (x) q_hat`` with
``C(q) ~= (I - skew(dtheta)) C(q_hat)``.
"""

import numpy as np

_NORM_TOL = 1e-9


def identity_quat():
    return np.array([0.0, 0.0, 0.0, 1.0])


def normalize(q):
    """Return ``q`` scaled to unit norm with a non-negative scalar part."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    if abs(n - 1.0) > _NORM_TOL or q[3] < 0.0:
        q = q / n
        if q[3] < 0.0:
            q = -q
    return q


def skew(v):
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_rot(q):
    x, y, z, w = q
    # (2w^2 - 1) I - 2 w [v x] + 2 v v^T
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2.0 * (x * y + z * w), 2.0 * (x * z - y * w)],
            [2.0 * (x * y - z * w), w * w - x * x + y * y - z * z, 2.0 * (y * z + x * w)],
            [2.0 * (x * z + y * w), 2.0 * (y * z - x * w), w * w - x * x - y * y + z * z],
        ]
    )


def rot_to_quat(R):
    """Inverse of :func:`quat_to_rot` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    # JPL: R[0,1] - R[1,0] = 4 z w, etc.
    diag = np.array([R[0, 0], R[1, 1], R[2, 2], tr])
    i = int(np.argmax(diag))
    if i == 3:
        w = 0.5 * np.sqrt(1.0 + tr)
        x = (R[1, 2] - R[2, 1]) / (4.0 * w)
        y = (R[2, 0] - R[0, 2]) / (4.0 * w)
        z = (R[0, 1] - R[1, 0]) / (4.0 * w)
    elif i == 0:
        x = 0.5 * np.sqrt(1.0 + 2.0 * R[0, 0] - tr)
        w = (R[1, 2] - R[2, 1]) / (4.0 * x)
        y = (R[0, 1] + R[1, 0]) / (4.0 * x)
        z = (R[0, 2] + R[2, 0]) / (4.0 * x)
    elif i == 1:
        y = 0.5 * np.sqrt(1.0 + 2.0 * R[1, 1] - tr)
        w = (R[2, 0] - R[0, 2]) / (4.0 * y)
        x = (R[0, 1] + R[1, 0]) / (4.0 * y)
        z = (R[1, 2] + R[2, 1]) / (4.0 * y)
    else:
        z = 0.5 * np.sqrt(1.0 + 2.0 * R[2, 2] - tr)
        w = (R[0, 1] - R[1, 0]) / (4.0 * z)
        x = (R[0, 2] + R[2, 0]) / (4.0 * z)
        y = (R[1, 2] + R[2, 1]) / (4.0 * z)
    return normalize(np.array([x, y, z, w]))


def quat_multiply(q, p):
    """JPL product ``q (x) p``."""
    x1, y1, z1, w1 = q
    x2, y2, z2, w2 = p
    # w1 pv + w2 qv - qv x pv, w1 w2 - qv.pv
    out = np.array([
        w1 * x2 + w2 * x1 - (y1 * z2 - z1 * y2),
        w1 * y2 + w2 * y1 - (z1 * x2 - x1 * z2),
        w1 * z2 + w2 * z1 - (x1 * y2 - y1 * x2),
        w1 * w2 - (x1 * x2 + y1 * y2 + z1 * z2),
    ])
    return normalize(out)


def quat_inverse(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_exp(dtheta):
    """Unit quaternion of the rotation vector ``dtheta`` (rad).

    ``quat_to_rot(quat_exp(t)) == expm(-skew(t))``.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    angle = np.linalg.norm(dtheta)
    if angle < 1e-12:
        q = np.empty(4)
        q[:3] = 0.5 * dtheta
        q[3] = 1.0
        return q / np.linalg.norm(q)
    half = 0.5 * angle
    q = np.empty(4)
    q[:3] = np.sin(half) / angle * dtheta
    q[3] = np.cos(half)
    return q


def quat_log(q):
    """Rotation vector of ``q``; inverse of :func:`quat_exp`."""
    q = normalize(q)
    vn = np.linalg.norm(q[:3])
    if vn < 1e-12:
        return 2.0 * q[:3]
    return 2.0 * np.arctan2(vn, q[3]) / vn * q[:3]


def small_angle_update(q, dtheta):
    """Inject a 3-dof orientation error correction into ``q``."""
    return quat_multiply(quat_exp(dtheta), q)


def quat_error(q_est, q_true):
    """Error vector ``dtheta`` with ``q_true = quat_exp(dtheta) (x) q_est``."""
    return quat_log(quat_multiply(q_true, quat_inverse(q_est)))


def so3_exp(phi):
    """Rotation matrix ``expm(skew(phi))`` (Rodrigues)."""
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * K @ K


def right_jacobian(phi):
    """Right Jacobian of SO(3) for the rotation vector ``phi``."""
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(angle)) / angle**2
    b = (angle - np.sin(angle)) / angle**3
    return np.eye(3) - a * K + b * K @ K
