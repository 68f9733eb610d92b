import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reference import random_psd
from sevis.geometry import normalize, quat_error, quat_to_rot, small_angle_update
from sevis.propagation import (
    GRAVITY,
    CompoundedTransition,
    ImuSample,
    NoiseParams,
    compound,
    error_state_jacobians,
    propagate_covariance,
    propagate_mean,
)
from sevis.state import FeatureState, ImuState, PartitionedCovariance, SevisState, add_active_feature, augment_clone

NOISE = NoiseParams(1.1636e-4, 5.818e-6, 5e-4, 4.0875e-5)


def random_case(rng):
    imu = ImuState(normalize(rng.standard_normal(4)), 0.01 * rng.standard_normal(3),
                   rng.standard_normal(3), 0.1 * rng.standard_normal(3), 5 * rng.standard_normal(3))
    sample = ImuSample(rng.standard_normal(3), 10 * rng.standard_normal(3), 0.0)
    return imu, sample


def perturb(imu, dx):
    return ImuState(small_angle_update(imu.q, dx[0:3]), imu.bg + dx[3:6], imu.v + dx[6:9],
                    imu.ba + dx[9:12], imu.p + dx[12:15], imu.timestamp)


def error_between(nom, other):
    return np.concatenate([quat_error(nom.q, other.q), other.bg - nom.bg, other.v - nom.v,
                           other.ba - nom.ba, other.p - nom.p])


def fd_transition(imu, sample, dt, h=1e-4):
    # h = 1e-4 balances truncation against roundoff on metre-scale positions
    nom = propagate_mean(imu, sample, dt)
    J = np.zeros((15, 15))
    for j in range(15):
        e = np.zeros(15)
        e[j] = h
        plus = error_between(nom, propagate_mean(perturb(imu, e), sample, dt))
        minus = error_between(nom, propagate_mean(perturb(imu, -e), sample, dt))
        J[:, j] = (plus - minus) / (2 * h)
    return J


def test_static_equilibrium():
    imu = ImuState(timestamp=0.0)
    out = propagate_mean(imu, ImuSample(np.zeros(3), -GRAVITY, 0.0), 0.01)
    assert np.array_equal(out.p, imu.p)
    assert np.array_equal(out.v, imu.v)
    assert np.allclose(out.q, imu.q, atol=1e-15)


def test_constant_yaw_rate():
    imu = ImuState()
    w = np.array([0.0, 0.0, np.pi / 2])
    for _ in range(100):
        imu = propagate_mean(imu, ImuSample(w, -GRAVITY, 0.0), 0.01)
    # global -> body rotation after a +90 deg yaw
    expected = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    err = quat_error(imu.q, normalize(np.array([0.0, 0.0, np.sin(np.pi / 4), np.cos(np.pi / 4)])))
    assert np.linalg.norm(err) < 1e-6
    assert np.allclose(quat_to_rot(imu.q), expected, atol=1e-6)
    assert imu.timestamp == pytest.approx(1.0)


def test_free_fall():
    imu = ImuState()
    for _ in range(100):
        imu = propagate_mean(imu, ImuSample(np.zeros(3), np.zeros(3), 0.0), 0.01)
    assert np.allclose(imu.p, 0.5 * GRAVITY, atol=1e-9)
    assert np.allclose(imu.v, GRAVITY, atol=1e-9)


def test_biases_unchanged_and_quat_normalized():
    imu, sample = random_case(np.random.default_rng(0))
    out = propagate_mean(imu, sample, 0.01)
    assert np.array_equal(out.bg, imu.bg) and np.array_equal(out.ba, imu.ba)
    assert np.linalg.norm(out.q) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("dt", [0.0, -0.01])
def test_rejects_non_positive_dt(dt):
    imu, sample = random_case(np.random.default_rng(0))
    with pytest.raises(ValueError):
        propagate_mean(imu, sample, dt)
    with pytest.raises(ValueError):
        error_state_jacobians(imu, sample, dt, NOISE)


def test_noise_params_must_be_positive():
    with pytest.raises(ValueError):
        NoiseParams(0.0, 1.0, 1.0, 1.0)


def test_jacobian_matches_central_differences_50_states():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        imu, sample = random_case(rng)
        Phi, _, _ = error_state_jacobians(imu, sample, 0.01, NOISE)
        J = fd_transition(imu, sample, 0.01)
        scale = np.maximum(np.abs(Phi), 1e-6)
        worst = max(worst, float(np.max(np.abs(J - Phi) / scale)))
    # per-entry tolerance at dt = 0.01; the looser max-relative bound is 1e-3
    assert worst < 1e-4


def test_jacobian_position_velocity_block():
    imu = ImuState(v=np.array([1.0, 0.0, 0.0]))
    Phi, _, _ = error_state_jacobians(imu, ImuSample(np.zeros(3), -GRAVITY, 0.0), 0.01, NOISE)
    assert np.allclose(Phi[12:15, 6:9], 0.01 * np.eye(3), atol=1e-9)


def test_injected_orientation_error_prediction():
    rng = np.random.default_rng(9)
    imu, sample = random_case(rng)
    Phi, _, nom = error_state_jacobians(imu, sample, 0.01, NOISE)
    dx = np.zeros(15)
    axis = rng.standard_normal(3)
    dx[0:3] = 1e-5 * axis / np.linalg.norm(axis)
    actual = error_between(nom, propagate_mean(perturb(imu, dx), sample, 0.01))
    predicted = Phi @ dx
    assert np.linalg.norm(actual - predicted) <= 1e-4 * np.linalg.norm(predicted)


def test_small_dt_limit():
    imu, sample = random_case(np.random.default_rng(1))
    Phi, Q, _ = error_state_jacobians(imu, sample, 1e-9, NOISE)
    assert np.allclose(Phi, np.eye(15), atol=1e-7)
    assert np.abs(Q).max() < 1e-15


def test_discrete_noise_structure():
    imu, sample = random_case(np.random.default_rng(2))
    dt = 0.01
    _, Q, _ = error_state_jacobians(imu, sample, dt, NOISE)
    assert np.array_equal(Q, Q.T)
    assert np.linalg.eigvalsh(Q).min() > -1e-20
    assert np.allclose(Q[0:3, 0:3], NOISE.sigma_g**2 * dt * np.eye(3), rtol=1e-12)
    assert np.allclose(Q[3:6, 3:6], NOISE.sigma_wg**2 * dt * np.eye(3), rtol=1e-12)
    assert np.allclose(Q[6:9, 6:9], NOISE.sigma_a**2 * dt * np.eye(3), rtol=1e-12)
    assert np.allclose(Q[9:12, 9:12], NOISE.sigma_wa**2 * dt * np.eye(3), rtol=1e-12)


def test_bias_covariance_grows_linearly():
    imu = ImuState()
    cov = PartitionedCovariance(np.zeros((15, 15)))
    dt, n = 0.01, 500
    for _ in range(n):
        Phi, Q, imu = error_state_jacobians(imu, ImuSample(np.zeros(3), -GRAVITY, 0.0), dt, NOISE)
        propagate_covariance(cov, CompoundedTransition(Phi, Q))
    T = n * dt
    assert np.allclose(np.diag(cov.P_AA)[3:6], NOISE.sigma_wg**2 * T, rtol=1e-9, atol=1e-20)
    assert np.allclose(np.diag(cov.P_AA)[9:12], NOISE.sigma_wa**2 * T, rtol=1e-9, atol=1e-20)


def test_compound_from_identity():
    rng = np.random.default_rng(3)
    Phi, Q = rng.standard_normal((15, 15)), random_psd(rng, 15)
    ct = compound(CompoundedTransition.identity(), (Phi, Q))
    assert np.array_equal(ct.Phi, Phi)
    assert np.array_equal(ct.Q, Q)


def test_compound_two_identity_steps_doubles_noise():
    Q = random_psd(np.random.default_rng(4), 15)
    ct = CompoundedTransition.identity()
    for _ in range(2):
        ct = compound(ct, (np.eye(15), Q))
    assert np.array_equal(ct.Q, 2 * Q)


def test_compound_shape_mismatch():
    with pytest.raises(ValueError):
        compound(CompoundedTransition.identity(), (np.eye(6), np.zeros((6, 6))))


def _integer_step(rng, n=15, density=0.08):
    # integer data keeps every float operation exact, so results can be compared bitwise
    Phi = np.eye(n) + rng.choice([-1.0, 0.0, 1.0], size=(n, n), p=[density / 2, 1 - density, density / 2])
    B = rng.integers(-2, 3, size=(n, n)).astype(float)
    return Phi, B @ B.T


def _loaded_cov(rng, P_AA, ns=6):
    P_AS = rng.integers(-3, 4, (P_AA.shape[0], ns)).astype(float)
    return PartitionedCovariance.from_blocks(P_AA, P_AS, np.eye(ns) * 7.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_compounding_equals_sequential_entry_exact(seed):
    rng = np.random.default_rng(seed)
    B = rng.integers(-3, 4, size=(27, 27)).astype(float)
    seq = _loaded_cov(rng, B @ B.T)
    once = seq.copy()
    ct = CompoundedTransition.identity()
    for _ in range(5):
        step = _integer_step(rng)
        ct = compound(ct, step)
        propagate_covariance(seq, CompoundedTransition(*step))
    propagate_covariance(once, ct)
    assert np.abs(once.P_AA).max() < 2.0**50
    assert np.array_equal(once.P_AA, seq.P_AA)
    assert np.array_equal(once.P_AS, seq.P_AS)
    assert np.array_equal(once.P_SS, seq.P_SS)


def test_compounding_with_imu_jacobians():
    rng = np.random.default_rng(5)
    for _ in range(20):
        imu, _ = random_case(rng)
        P = random_psd(rng, 15)
        seq = PartitionedCovariance(P)
        once = PartitionedCovariance(P)
        ct = CompoundedTransition.identity()
        for _ in range(5):
            sample = ImuSample(rng.standard_normal(3), 10 * rng.standard_normal(3), 0.0)
            Phi, Q, imu = error_state_jacobians(imu, sample, 0.01, NOISE)
            ct = compound(ct, (Phi, Q))
            propagate_covariance(seq, CompoundedTransition(Phi, Q))
        propagate_covariance(once, ct)
        assert np.allclose(once.P_AA, seq.P_AA, rtol=1e-12, atol=1e-14)


def test_propagate_covariance_matches_dense_block_diagonal():
    rng = np.random.default_rng(6)
    s = SevisState()
    cov = PartitionedCovariance(random_psd(rng, 15), n_max=3)
    augment_clone(s, cov)
    add_active_feature(s, cov, FeatureState(0, np.zeros(3)), 0.1 * rng.standard_normal((21, 3)), np.eye(3))
    cov = PartitionedCovariance.from_blocks(cov.P_AA.copy(), rng.standard_normal((24, 6)), random_psd(rng, 6), 3)
    full = cov.full()
    Phi, Q = rng.standard_normal((15, 15)), random_psd(rng, 15)
    big_Phi = np.eye(30)
    big_Phi[:15, :15] = Phi
    big_Q = np.zeros((30, 30))
    big_Q[:15, :15] = Q
    expected = big_Phi @ full @ big_Phi.T + big_Q
    P_SS = cov.P_SS.copy()
    propagate_covariance(cov, CompoundedTransition(Phi, Q))
    assert np.allclose(cov.full(), expected, rtol=1e-12, atol=1e-12)
    assert np.array_equal(cov.P_SS, P_SS)


def test_propagate_full_active_size_and_zero_cross():
    rng = np.random.default_rng(7)
    P = random_psd(rng, 21)
    cov = PartitionedCovariance.from_blocks(P, np.zeros((21, 3)), np.eye(3))
    Phi, Q = rng.standard_normal((21, 21)), random_psd(rng, 21)
    propagate_covariance(cov, CompoundedTransition(Phi, Q))
    assert np.allclose(cov.P_AA, Phi @ P @ Phi.T + Q, rtol=1e-12, atol=1e-12)
    assert np.array_equal(cov.P_AS, np.zeros((21, 3)))


def test_propagate_identity_is_noop():
    P = random_psd(np.random.default_rng(8), 15)
    cov = PartitionedCovariance(P)
    propagate_covariance(cov, CompoundedTransition.identity())
    assert np.array_equal(cov.P_AA, P)


def test_propagate_dimension_mismatch():
    cov = PartitionedCovariance(np.eye(21))
    with pytest.raises(ValueError):
        propagate_covariance(cov, CompoundedTransition.identity(9))
