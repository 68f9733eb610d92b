"""Filter state and the partitioned active/Schmidt covariance.

Active error-state layout (``x_A``)::

    [ imu (15) | clone_0 (6) ... clone_{m-1} (6) | slam_0 (3) ... ]

with the IMU block ordered ``[dtheta, dbg, dv, dba, dp]``, clones stored
newest first with ``[dtheta, dp]`` each, and active SLAM features as global
xyz. The Schmidt block ``x_S`` holds map features in insertion order except
where a swap-remove has moved the last feature into a freed slot.
"""

from dataclasses import dataclass, field

import numpy as np

from sevis.geometry import identity_quat

IMU_DIM = 15
CLONE_DIM = 6
FEAT_DIM = 3

THETA = slice(0, 3)
BG = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
POS = slice(12, 15)

# rows of the IMU block copied into a new clone
_POSE_ROWS = np.r_[0:3, 12:15]


class WindowFullError(RuntimeError):
    pass


class SchmidtCapacityError(RuntimeError):
    pass


@dataclass
class ImuState:
    q: np.ndarray = field(default_factory=identity_quat)
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def copy(self):
        return ImuState(self.q.copy(), self.bg.copy(), self.v.copy(),
                        self.ba.copy(), self.p.copy(), self.timestamp)


@dataclass
class ClonePose:
    q: np.ndarray
    p: np.ndarray
    timestamp: float


@dataclass
class FeatureState:
    id: int
    position: np.ndarray


@dataclass
class SevisState:
    imu: ImuState = field(default_factory=ImuState)
    clones: list = field(default_factory=list)
    active_features: list = field(default_factory=list)
    schmidt_features: list = field(default_factory=list)
    max_clones: int = 15

    @property
    def active_dim(self):
        return IMU_DIM + CLONE_DIM * len(self.clones) + FEAT_DIM * len(self.active_features)

    @property
    def schmidt_dim(self):
        return FEAT_DIM * len(self.schmidt_features)

    def clone_offset(self, index):
        return IMU_DIM + CLONE_DIM * index

    def clone_index(self, timestamp):
        for i, c in enumerate(self.clones):
            if c.timestamp == timestamp:
                return i
        raise KeyError(f"no clone at t={timestamp}")

    def clone_index_map(self):
        return {c.timestamp: i for i, c in enumerate(self.clones)}

    def active_feature_offset(self, feature_id):
        base = IMU_DIM + CLONE_DIM * len(self.clones)
        for i, f in enumerate(self.active_features):
            if f.id == feature_id:
                return base + FEAT_DIM * i
        raise KeyError(f"feature {feature_id} is not active")

    def schmidt_offset(self, feature_id):
        for i, f in enumerate(self.schmidt_features):
            if f.id == feature_id:
                return FEAT_DIM * i
        raise KeyError(f"feature {feature_id} is not in the Schmidt state")

    def active_ids(self):
        return {f.id for f in self.active_features}

    def schmidt_ids(self):
        return {f.id for f in self.schmidt_features}

    def inject(self, dx):
        """Apply an active error-state correction ``dx`` in place."""
        from sevis.geometry import small_angle_update

        imu = self.imu
        imu.q = small_angle_update(imu.q, dx[THETA])
        imu.bg = imu.bg + dx[BG]
        imu.v = imu.v + dx[VEL]
        imu.ba = imu.ba + dx[BA]
        imu.p = imu.p + dx[POS]
        off = IMU_DIM
        for c in self.clones:
            c.q = small_angle_update(c.q, dx[off:off + 3])
            c.p = c.p + dx[off + 3:off + 6]
            off += CLONE_DIM
        for f in self.active_features:
            f.position = f.position + dx[off:off + 3]
            off += FEAT_DIM


class PartitionedCovariance:
    """Covariance stored as separate ``P_AA``, ``P_AS`` and ``P_SS`` blocks.

    ``P_SS`` and the columns of ``P_AS`` are pre-allocated for ``n_max``
    Schmidt features. Active rows live in a buffer that grows geometrically.
    The public ``P_AA``/``P_AS``/``P_SS`` attributes are writable views.
    """

    def __init__(self, P_AA, n_max=0):
        P_AA = np.asarray(P_AA, dtype=float)
        na = P_AA.shape[0]
        self.n_max = int(n_max)
        self._cap = max(2 * na, IMU_DIM + CLONE_DIM * 16)
        self._aa = np.zeros((self._cap, self._cap))
        self._as = np.zeros((self._cap, FEAT_DIM * self.n_max))
        self._ss = np.zeros((FEAT_DIM * self.n_max, FEAT_DIM * self.n_max))
        self._aa[:na, :na] = P_AA
        self.na = na
        self.ns = 0

    @classmethod
    def from_blocks(cls, P_AA, P_AS, P_SS, n_max=None):
        ns = P_SS.shape[0]
        cov = cls(P_AA, n_max if n_max is not None else ns // FEAT_DIM)
        if ns > FEAT_DIM * cov.n_max:
            raise SchmidtCapacityError("P_SS larger than capacity")
        cov._as[:cov.na, :ns] = P_AS
        cov._ss[:ns, :ns] = P_SS
        cov.ns = ns
        return cov

    @property
    def P_AA(self):
        return self._aa[:self.na, :self.na]

    @property
    def P_AS(self):
        return self._as[:self.na, :self.ns]

    @property
    def P_SS(self):
        return self._ss[:self.ns, :self.ns]

    def full(self):
        return np.block([[self.P_AA, self.P_AS], [self.P_AS.T, self.P_SS]])

    def copy(self):
        return PartitionedCovariance.from_blocks(
            self.P_AA.copy(), self.P_AS.copy(), self.P_SS.copy(), self.n_max)

    def symmetrize_active(self):
        P = self.P_AA
        P[...] = 0.5 * (P + P.T)

    def _grow(self, extra):
        need = self.na + extra
        if need <= self._cap:
            return
        cap = max(need, 2 * self._cap)
        aa = np.zeros((cap, cap))
        aa[:self.na, :self.na] = self.P_AA
        as_ = np.zeros((cap, self._as.shape[1]))
        as_[:self.na] = self._as[:self.na]
        self._aa, self._as, self._cap = aa, as_, cap

    def insert_active(self, at, cross, block, as_rows):
        """Insert ``k`` active rows/cols before active index ``at``.

        ``cross`` is the (old na x k) covariance with the existing active
        states, ``block`` the (k x k) diagonal block, ``as_rows`` the
        (k x ns) cross-covariance with the Schmidt states.
        """
        k = block.shape[0]
        na, ns = self.na, self.ns
        self._grow(k)
        aa, as_ = self._aa, self._as
        # shift trailing rows down, then trailing cols right
        aa[at + k:na + k, :na] = aa[at:na, :na]
        aa[:na + k, at + k:na + k] = aa[:na + k, at:na]
        as_[at + k:na + k, :ns] = as_[at:na, :ns]
        aa[:at, at:at + k] = cross[:at]
        aa[at + k:na + k, at:at + k] = cross[at:]
        aa[at:at + k, :at] = cross[:at].T
        aa[at:at + k, at + k:na + k] = cross[at:].T
        aa[at:at + k, at:at + k] = block
        as_[at:at + k, :ns] = as_rows
        self.na = na + k

    def remove_active(self, at, k):
        """Delete ``k`` active rows/cols starting at ``at`` by upward copy."""
        na, ns = self.na, self.ns
        if at < 0 or at + k > na:
            raise IndexError("active block out of range")
        aa, as_ = self._aa, self._as
        aa[at:na - k, :na] = aa[at + k:na, :na]
        aa[:na - k, at:na - k] = aa[:na - k, at + k:na]
        as_[at:na - k, :ns] = as_[at + k:na, :ns]
        self.na = na - k

    def move_active_to_schmidt(self, at, k=FEAT_DIM):
        """Relocate active rows ``at:at+k`` to the end of the Schmidt block."""
        ns = self.ns
        if ns + k > self._ss.shape[0]:
            raise SchmidtCapacityError("Schmidt block is full")
        na = self.na
        aa, as_, ss = self._aa, self._as, self._ss
        # block column of P_AA onto the last column of P_AS
        as_[:na, ns:ns + k] = aa[:na, at:at + k]
        # block row of P_AS into the last row/column of P_SS
        ss[ns:ns + k, :ns] = as_[at:at + k, :ns]
        ss[:ns, ns:ns + k] = as_[at:at + k, :ns].T
        ss[ns:ns + k, ns:ns + k] = aa[at:at + k, at:at + k]
        self.ns = ns + k
        self.remove_active(at, k)

    def swap_remove_schmidt(self, at, k=FEAT_DIM):
        """Drop Schmidt rows ``at:at+k``, overwriting them with the last block."""
        ns = self.ns
        if at < 0 or at + k > ns:
            raise IndexError("Schmidt block out of range")
        last = ns - k
        if at != last:
            as_, ss = self._as, self._ss
            as_[:self.na, at:at + k] = as_[:self.na, last:ns]
            ss[at:at + k, :ns] = ss[last:ns, :ns]
            ss[:ns, at:at + k] = ss[:ns, last:ns]
        self.ns = last


def augment_clone(state, cov):
    """Stochastic cloning of the current IMU pose (newest clone first)."""
    if len(state.clones) >= state.max_clones:
        raise WindowFullError("clone window full; marginalize first")
    imu = state.imu
    P = cov.P_AA
    cross = P[:, _POSE_ROWS].copy()
    block = P[np.ix_(_POSE_ROWS, _POSE_ROWS)].copy()
    as_rows = cov.P_AS[_POSE_ROWS].copy()
    cov.insert_active(IMU_DIM, cross, block, as_rows)
    state.clones.insert(0, ClonePose(imu.q.copy(), imu.p.copy(), imu.timestamp))


def marginalize_clone(state, cov, clone_index):
    if not 0 <= clone_index < len(state.clones):
        raise IndexError(f"clone index {clone_index} out of range")
    cov.remove_active(state.clone_offset(clone_index), CLONE_DIM)
    del state.clones[clone_index]


def add_active_feature(state, cov, feature, cross, block, as_rows=None):
    """Append a SLAM feature with the given covariance blocks."""
    if as_rows is None:
        as_rows = np.zeros((FEAT_DIM, cov.ns))
    cov.insert_active(cov.na, cross, block, as_rows)
    state.active_features.append(feature)


def marginalize_active_feature(state, cov, feature_id):
    at = state.active_feature_offset(feature_id)
    cov.remove_active(at, FEAT_DIM)
    state.active_features = [f for f in state.active_features if f.id != feature_id]


def move_feature_to_schmidt(state, cov, feature_id):
    at = state.active_feature_offset(feature_id)
    cov.move_active_to_schmidt(at, FEAT_DIM)
    idx = next(i for i, f in enumerate(state.active_features) if f.id == feature_id)
    state.schmidt_features.append(state.active_features.pop(idx))


def marginalize_schmidt_feature(state, cov, feature_id):
    at = state.schmidt_offset(feature_id)
    cov.swap_remove_schmidt(at, FEAT_DIM)
    idx = at // FEAT_DIM
    last = state.schmidt_features.pop()
    if idx < len(state.schmidt_features):
        state.schmidt_features[idx] = last


SNAPSHOT_COLUMNS = ("t", "px", "py", "pz", "qx", "qy", "qz", "qw",
                    "n_clones", "n_slam", "n_schmidt")


def state_snapshot(state):
    """Flat record of the current pose and feature counts."""
    imu = state.imu
    return dict(zip(SNAPSHOT_COLUMNS, (
        imu.timestamp, *imu.p.tolist(), *imu.q.tolist(),
        len(state.clones), len(state.active_features), len(state.schmidt_features))))


def format_snapshot(snapshot):
    return ",".join(
        repr(float(v)) if isinstance(v, float) else str(v)
        for v in (snapshot[c] for c in SNAPSHOT_COLUMNS))
