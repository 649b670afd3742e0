"""
Tests for odometry.imu: saturation, preintegration, bias correction,
propagation and the preintegration residual.
"""

import numpy as np
import pytest

from odometry.errors import BiasDeltaTooLarge, EmptyInterval, ImuError, NonMonotonicTimestamps
from odometry.geometry import Rotation
from odometry.imu import (
    STANDARD_GRAVITY,
    GravityVector,
    ImuNoise,
    ImuSample,
    KeyframeState,
    SaturationLimits,
    combine,
    correct_for_bias,
    imu_residual,
    imu_residual_jacobians,
    predict_state,
    preintegrate,
    propagate_state,
    reintegrate,
    saturate_stream,
)

REST = np.array([0.0, 0.0, STANDARD_GRAVITY])


def constant_samples(gyro, accel, duration=1.0, rate=200.0, t0=0.0):
    n = int(round(duration * rate)) + 1
    return [ImuSample(t0 + i / rate, gyro, accel) for i in range(n)]


def at_rest(timestamp=0.0):
    return KeyframeState(timestamp, np.zeros(3), np.zeros(3), Rotation.identity())


# ---------------------------------------------------------------------------
# saturation
# ---------------------------------------------------------------------------

def test_saturation_clamps_jumps_per_axis():
    samples = [ImuSample(0.0, np.zeros(3), REST),
               ImuSample(0.005, [0.0, 5.0, 0.0], REST + [50.0, 0.0, 0.0]),
               ImuSample(0.010, [0.0, 5.0, 0.0], REST + [50.0, 0.0, 0.0])]
    out = saturate_stream(samples, SaturationLimits(np.full(3, 10.0), np.full(3, 1.0)))
    assert np.allclose(out[1].accel, REST + [10.0, 0.0, 0.0])
    assert np.allclose(out[1].gyro, [0.0, 1.0, 0.0])
    # clamped against the previous output, not the previous raw sample
    assert np.allclose(out[2].accel, REST + [20.0, 0.0, 0.0])
    assert np.allclose(out[2].gyro, [0.0, 2.0, 0.0])


def test_saturation_disabled_passes_samples_through():
    samples = [ImuSample(0.0, np.zeros(3), REST), ImuSample(0.005, [9.0, 0.0, 0.0], REST * 3)]
    out = saturate_stream(samples, SaturationLimits())
    assert out[1] is samples[1]


def test_saturation_keeps_samples_within_limits():
    samples = [ImuSample(0.0, np.zeros(3), REST), ImuSample(0.005, [0.1, 0.0, 0.0], REST + [0.5, 0.0, 0.0])]
    out = saturate_stream(samples, SaturationLimits(np.full(3, 10.0), np.full(3, 1.0)))
    assert out[1] is samples[1]


def test_saturation_continues_from_previous_sample():
    prev = ImuSample(0.0, np.zeros(3), REST)
    out = saturate_stream([ImuSample(0.005, np.zeros(3), REST + [0.0, 0.0, 30.0])],
                          SaturationLimits(accel=np.full(3, 5.0)), prev)
    assert out[0].accel[2] == pytest.approx(STANDARD_GRAVITY + 5.0)


# ---------------------------------------------------------------------------
# preintegration
# ---------------------------------------------------------------------------

def test_preintegrate_needs_two_samples():
    with pytest.raises(EmptyInterval):
        preintegrate([ImuSample(0.0, np.zeros(3), REST)])


def test_preintegrate_rejects_non_monotonic_timestamps():
    samples = [ImuSample(t, np.zeros(3), REST) for t in (0.0, 0.01, 0.01, 0.02)]
    with pytest.raises(NonMonotonicTimestamps):
        preintegrate(samples)


def test_stationary_body_stays_put():
    preint = preintegrate(constant_samples(np.zeros(3), REST))
    assert preint.delta_t == pytest.approx(1.0)
    state = predict_state(at_rest(), preint, GravityVector())
    assert np.allclose(state.position, 0.0, atol=1e-9)
    assert np.allclose(state.velocity, 0.0, atol=1e-9)
    assert state.rotation.angle() < 1e-12
    assert state.timestamp == pytest.approx(1.0)


def test_constant_turn_rate():
    preint = preintegrate(constant_samples([0.0, 0.0, 0.5], REST))
    assert np.allclose(preint.rotation.log(), [0.0, 0.0, 0.5], atol=1e-12)


def test_constant_acceleration_from_rest():
    accel = REST + [1.0, 0.0, 0.0]
    state = propagate_state(at_rest(), GravityVector(), constant_samples(np.zeros(3), accel, 2.0))
    assert np.allclose(state.position, [2.0, 0.0, 0.0], atol=1e-9)
    assert np.allclose(state.velocity, [2.0, 0.0, 0.0], atol=1e-9)


def test_covariance_is_symmetric_and_grows():
    samples = constant_samples([0.1, -0.2, 0.3], REST + [0.2, 0.1, 0.0])
    short = preintegrate(samples[:21])
    full = preintegrate(samples)
    for preint in (short, full):
        assert np.allclose(preint.covariance, preint.covariance.T, atol=1e-15)
        assert np.linalg.eigvalsh(preint.covariance).min() > -1e-15
    assert np.trace(full.covariance) > np.trace(short.covariance)
    assert full.sqrt_information.shape == (15, 15)


def test_without_covariance_keeps_motion_terms():
    samples = constant_samples([0.1, 0.0, 0.2], REST + [0.3, 0.0, 0.0])
    a = preintegrate(samples)
    b = preintegrate(samples, with_covariance=False)
    assert np.allclose(a.alpha, b.alpha)
    assert np.allclose(a.gamma, b.gamma)
    assert not b.covariance.any()


def turning_samples(rng, n=201, rate=200.0):
    t = np.arange(n) / rate
    gyro = np.column_stack([0.3 * np.sin(2 * t), 0.2 * np.cos(3 * t), 0.5 + 0.1 * t])
    accel = REST + np.column_stack([np.sin(t), 0.5 * np.cos(2 * t), 0.2 * t])
    return [ImuSample(ti, wi, ai) for ti, wi, ai in zip(t, gyro, accel)]


def test_bias_correction_matches_reintegration(rng):
    preint = preintegrate(turning_samples(rng))
    ba, bg = np.array([0.01, -0.02, 0.015]), np.array([0.002, 0.001, -0.003])
    corrected = correct_for_bias(preint, ba, bg)
    exact = reintegrate(preint, ba, bg)
    assert np.allclose(corrected.alpha, exact.alpha, atol=1e-4)
    assert np.allclose(corrected.beta, exact.beta, atol=1e-4)
    assert np.allclose(Rotation(corrected.gamma).log(), Rotation(exact.gamma).log(), atol=1e-5)
    assert np.allclose(corrected.bias_gyro, bg)


def test_bias_correction_rejects_large_change(rng):
    preint = preintegrate(turning_samples(rng))
    with pytest.raises(BiasDeltaTooLarge):
        correct_for_bias(preint, np.zeros(3), [0.2, 0.0, 0.0])


def test_combine_equals_single_pass(rng):
    samples = turning_samples(rng)
    whole = preintegrate(samples)
    joined = combine(preintegrate(samples[:101]), preintegrate(samples[100:]))
    assert joined.delta_t == pytest.approx(whole.delta_t)
    assert np.allclose(joined.alpha, whole.alpha, atol=1e-9)
    assert np.allclose(joined.beta, whole.beta, atol=1e-9)
    assert np.allclose(joined.gamma, whole.gamma, atol=1e-9)
    assert np.allclose(joined.jacobian[:9, 9:], whole.jacobian[:9, 9:], atol=1e-6)
    assert np.allclose(joined.covariance, whole.covariance, rtol=1e-4, atol=1e-12)
    assert len(joined.samples) == len(samples)


def test_combine_requires_contiguous_intervals(rng):
    samples = turning_samples(rng)
    with pytest.raises(ImuError):
        combine(preintegrate(samples[:50]), preintegrate(samples[100:]))


# ---------------------------------------------------------------------------
# against simulated ground truth
# ---------------------------------------------------------------------------

def test_prediction_tracks_simulated_motion(figure8_bundle):
    bundle = figure8_bundle
    gravity = GravityVector()
    for k in (1, 20, 60):
        preint = preintegrate(bundle.imu_interval(k))
        predicted = predict_state(bundle.states[k - 1], preint, gravity)
        truth = bundle.states[k]
        assert np.linalg.norm(predicted.position - truth.position) < 1e-3
        assert np.linalg.norm(predicted.velocity - truth.velocity) < 1e-2
        assert predicted.pose.distance_to(truth.pose)[1] < 0.01


def test_residual_vanishes_on_ground_truth(figure8_bundle):
    bundle = figure8_bundle
    preint = preintegrate(bundle.imu_interval(10), noise=ImuNoise())
    r = imu_residual(preint, bundle.states[9], bundle.states[10], GravityVector())
    assert np.linalg.norm(r[:3]) < 1e-4
    assert np.linalg.norm(r[3:9]) < 1e-2
    assert not r[9:].any()


def test_residual_jacobians_for_vector_blocks(figure8_bundle):
    bundle = figure8_bundle
    gravity = GravityVector()
    preint = preintegrate(bundle.imu_interval(5))
    state_i, state_j = bundle.states[4].copy(), bundle.states[5].copy()
    state_i.bias_acc = np.array([0.01, 0.0, -0.01])
    analytic = imu_residual_jacobians(preint, state_i, state_j, gravity)
    eps = 1e-6
    for key, attr, state in (("p_i", "position", state_i), ("v_i", "velocity", state_i),
                             ("ba_i", "bias_acc", state_i), ("p_j", "position", state_j),
                             ("v_j", "velocity", state_j)):
        numeric = np.zeros((15, 3))
        for axis in range(3):
            base = getattr(state, attr).copy()
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[axis] += sign * eps
                setattr(state, attr, bumped)
                numeric[:, axis] += sign * imu_residual(preint, state_i, state_j, gravity) / (2 * eps)
            setattr(state, attr, base)
        assert np.allclose(analytic[key], numeric, atol=1e-5), key
