import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reference import DenseCovariance, partition_labels, random_psd
from sevis.geometry import identity_quat, quat_error
from sevis.state import (
    FeatureState,
    PartitionedCovariance,
    SchmidtCapacityError,
    SevisState,
    WindowFullError,
    add_active_feature,
    augment_clone,
    format_snapshot,
    marginalize_active_feature,
    marginalize_clone,
    marginalize_schmidt_feature,
    move_feature_to_schmidt,
    state_snapshot,
)

OPS = ("clone", "marg_clone", "add_feature", "to_schmidt", "marg_active", "marg_schmidt")


class Harness:
    """Applies the same operation to the block store and the dense reference."""

    def __init__(self, rng, n_max=4, max_clones=5):
        P0 = random_psd(rng, 15)
        self.rng = rng
        self.state = SevisState(max_clones=max_clones)
        self.cov = PartitionedCovariance(P0, n_max=n_max)
        self.ref = DenseCovariance(P0)
        self.t = 0.0
        self.next_id = 0

    def apply(self, op, pick):
        s, cov, ref = self.state, self.cov, self.ref
        if op == "clone" and len(s.clones) < s.max_clones:
            self.t += 1.0
            s.imu.timestamp = self.t
            augment_clone(s, cov)
            ref.clone(self.t)
        elif op == "marg_clone" and s.clones:
            i = pick % len(s.clones)
            ref.remove([("clone", s.clones[i].timestamp, k) for k in range(6)])
            marginalize_clone(s, cov, i)
        elif op == "add_feature":
            fid = self.next_id
            self.next_id += 1
            labels = partition_labels(s)
            rows = {lab: self.rng.standard_normal(3) for lab in labels}
            block = random_psd(self.rng, 3)
            na = cov.na
            cross = np.array([rows[lab] for lab in labels[:na]])
            as_rows = np.array([rows[lab] for lab in labels[na:]]).T.reshape(3, cov.ns)
            add_active_feature(s, cov, FeatureState(fid, np.zeros(3)), cross, block, as_rows)
            ref.add_feature(fid, rows, block)
        elif op == "to_schmidt" and s.active_features and len(s.schmidt_features) < cov.n_max:
            f = s.active_features[pick % len(s.active_features)]
            move_feature_to_schmidt(s, cov, f.id)
        elif op == "marg_active" and s.active_features:
            f = s.active_features[pick % len(s.active_features)]
            ref.remove([("feat", f.id, k) for k in range(3)])
            marginalize_active_feature(s, cov, f.id)
        elif op == "marg_schmidt" and s.schmidt_features:
            f = s.schmidt_features[pick % len(s.schmidt_features)]
            ref.remove([("feat", f.id, k) for k in range(3)])
            marginalize_schmidt_feature(s, cov, f.id)

    def check(self):
        s, cov = self.state, self.cov
        assert cov.na == s.active_dim
        assert cov.ns == s.schmidt_dim
        assert not (s.active_ids() & s.schmidt_ids())
        expected = self.ref.ordered(partition_labels(s))
        assert np.array_equal(cov.full(), expected)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(OPS), st.integers(0, 50)), min_size=1, max_size=40),
       st.integers(0, 2**31 - 1))
def test_random_operation_sequences_match_dense_reference(ops, seed):
    h = Harness(np.random.default_rng(seed))
    for op, pick in ops:
        h.apply(op, pick)
        h.check()


def test_long_sequence_with_buffer_growth():
    rng = np.random.default_rng(7)
    h = Harness(rng, n_max=6, max_clones=30)
    for _ in range(400):
        h.apply(OPS[rng.integers(len(OPS))], int(rng.integers(100)))
    h.check()


def test_clone_copies_pose_block():
    rng = np.random.default_rng(1)
    P0 = random_psd(rng, 15)
    s, cov = SevisState(), PartitionedCovariance(P0, n_max=2)
    augment_clone(s, cov)
    pose = np.r_[0:3, 12:15]
    assert cov.na == 21
    assert np.array_equal(cov.P_AA[15:, 15:], P0[np.ix_(pose, pose)])
    assert np.array_equal(cov.P_AA[:15, 15:], P0[:, pose])
    assert np.trace(cov.P_AA) == pytest.approx(np.trace(P0) + np.trace(P0[np.ix_(pose, pose)]), rel=1e-14)


def test_newest_clone_first():
    s, cov = SevisState(), PartitionedCovariance(np.eye(15))
    for t in (1.0, 2.0, 3.0):
        s.imu.timestamp = t
        augment_clone(s, cov)
    assert [c.timestamp for c in s.clones] == [3.0, 2.0, 1.0]
    assert s.clone_index(1.0) == 2
    assert s.clone_offset(2) == 27


def test_window_full_raises():
    s, cov = SevisState(max_clones=2), PartitionedCovariance(np.eye(15))
    augment_clone(s, cov)
    augment_clone(s, cov)
    with pytest.raises(WindowFullError):
        augment_clone(s, cov)


def test_schmidt_capacity_raises():
    s, cov = SevisState(), PartitionedCovariance(np.eye(15), n_max=1)
    for fid in (0, 1):
        add_active_feature(s, cov, FeatureState(fid, np.zeros(3)), np.zeros((cov.na, 3)), np.eye(3))
    move_feature_to_schmidt(s, cov, 0)
    with pytest.raises(SchmidtCapacityError):
        move_feature_to_schmidt(s, cov, 1)


def test_active_operations_leave_p_ss_untouched():
    rng = np.random.default_rng(3)
    h = Harness(rng, n_max=5, max_clones=6)
    for op in ("clone", "add_feature", "add_feature", "to_schmidt", "to_schmidt", "clone"):
        h.apply(op, 0)
    before = h.cov.P_SS.copy()
    for op in ("clone", "marg_clone", "add_feature", "marg_active", "clone", "marg_clone"):
        h.apply(op, 1)
        assert np.array_equal(h.cov.P_SS, before)


def test_marginalization_is_exact_submatrix():
    rng = np.random.default_rng(4)
    h = Harness(rng)
    for op in ("clone", "clone", "add_feature", "clone"):
        h.apply(op, 0)
    full = h.cov.full()
    h.apply("marg_clone", 1)
    keep = np.r_[0:21, 27:full.shape[0]]
    assert np.array_equal(h.cov.full(), full[np.ix_(keep, keep)])


def test_move_to_schmidt_is_permutation():
    rng = np.random.default_rng(5)
    h = Harness(rng)
    for op in ("clone", "add_feature", "add_feature"):
        h.apply(op, 0)
    full = h.cov.full()
    na = h.cov.na
    h.apply("to_schmidt", 0)
    # first feature rows move from the active tail to the Schmidt head
    at = na - 6
    perm = np.r_[0:at, at + 3:na, at:at + 3]
    assert np.array_equal(h.cov.full(), full[np.ix_(perm, perm)])
    assert np.trace(h.cov.full()) == np.trace(full)


def test_inject_applies_corrections():
    s, cov = SevisState(), PartitionedCovariance(np.eye(15))
    augment_clone(s, cov)
    add_active_feature(s, cov, FeatureState(9, np.ones(3)), np.zeros((21, 3)), np.eye(3))
    dx = np.arange(24) * 1e-3
    s.inject(dx)
    assert np.allclose(quat_error(identity_quat(), s.imu.q), dx[0:3], atol=1e-9)
    assert np.allclose(s.imu.v, dx[6:9])
    assert np.allclose(s.clones[0].p, dx[18:21])
    assert np.allclose(s.active_features[0].position, 1 + dx[21:24])


def test_snapshot_row():
    s = SevisState()
    s.imu.timestamp = 0.5
    row = format_snapshot(state_snapshot(s))
    assert row == "0.5,0.0,0.0,0.0,0.0,0.0,0.0,1.0,0,0,0"
