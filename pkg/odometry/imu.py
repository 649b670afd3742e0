"""
Stereo-Inertial Odometry - IMU Processing

Raw-sample saturation, midpoint preintegration between keyframes (with
covariance and bias Jacobians), dead-reckoning propagation and the
preintegration residual used by the window optimizer.

Gravity convention: g^w = (0, 0, -9.80665); a sensor at rest with identity
attitude measures specific force (0, 0, +9.80665).

Error-state order everywhere in this module: [dtheta, dalpha, dbeta, dba, dbg].

License: MIT
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from odometry.errors import BiasDeltaTooLarge, EmptyInterval, ImuError, NonMonotonicTimestamps
from odometry.geometry import (
    Rotation,
    Transform,
    quat_conjugate,
    quat_left,
    quat_multiply,
    quat_right,
    quat_to_matrix,
    right_jacobian,
    skew,
    so3_exp,
)
from odometry.optimizer import Factor

logger = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.80665

TH, AL, BE, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: timestamp (s), angular velocity (rad/s), specific force (m/s^2)."""

    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities and bias random walks."""

    accel_noise: float = 0.08
    gyro_noise: float = 0.004
    accel_walk: float = 4.0e-5
    gyro_walk: float = 2.0e-6


def imu_noise(cfg):
    return ImuNoise(cfg["imu.accel_noise_density"], cfg["imu.gyro_noise_density"],
                    cfg["imu.accel_random_walk"], cfg["imu.gyro_random_walk"])


@dataclass(frozen=True)
class SaturationLimits:
    """Max per-sample change for each axis; None disables a sensor."""

    accel: np.ndarray = None
    gyro: np.ndarray = None


def saturation_limits(cfg):
    accel = np.full(3, cfg["imu.saturation_accel"]) if cfg["imu.saturate_accel"] else None
    gyro = np.full(3, cfg["imu.saturation_gyro"]) if cfg["imu.saturate_gyro"] else None
    return SaturationLimits(accel, gyro)


@dataclass(frozen=True)
class GravityVector:
    vector: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -STANDARD_GRAVITY]))

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float).reshape(3))

    @classmethod
    def from_direction(cls, direction, magnitude=STANDARD_GRAVITY):
        direction = np.asarray(direction, dtype=float)
        return cls(magnitude * direction / np.linalg.norm(direction))

    @property
    def magnitude(self):
        return float(np.linalg.norm(self.vector))


@dataclass
class KeyframeState:
    """Body state in the world frame plus IMU biases."""

    timestamp: float
    position: np.ndarray
    velocity: np.ndarray
    rotation: Rotation
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.bias_acc = np.asarray(self.bias_acc, dtype=float).reshape(3)
        self.bias_gyro = np.asarray(self.bias_gyro, dtype=float).reshape(3)

    @property
    def pose(self):
        return Transform(self.rotation, self.position)

    @property
    def speed_bias(self):
        return np.concatenate([self.velocity, self.bias_acc, self.bias_gyro])

    def copy(self):
        return KeyframeState(self.timestamp, self.position.copy(), self.velocity.copy(),
                             Rotation(self.rotation.q), self.bias_acc.copy(), self.bias_gyro.copy())

    def biases_within(self, max_acc, max_gyro):
        return (np.all(np.isfinite(self.speed_bias))
                and np.linalg.norm(self.bias_acc) < max_acc
                and np.linalg.norm(self.bias_gyro) < max_gyro)


# ---------------------------------------------------------------------------
# saturation
# ---------------------------------------------------------------------------

def saturate_sample(prev, raw, limits):
    """Clamp each axis of ``raw`` to ``prev`` +/- limit."""
    accel, gyro = raw.accel, raw.gyro
    if limits.accel is not None:
        accel = np.clip(accel, prev.accel - limits.accel, prev.accel + limits.accel)
    if limits.gyro is not None:
        gyro = np.clip(gyro, prev.gyro - limits.gyro, prev.gyro + limits.gyro)
    if np.array_equal(accel, raw.accel) and np.array_equal(gyro, raw.gyro):
        return raw
    return ImuSample(raw.timestamp, gyro, accel)


def saturate_stream(samples, limits, prev=None):
    """Saturate a stream sample by sample against the previous output."""
    out = []
    for sample in samples:
        if prev is not None:
            sample = saturate_sample(prev, sample, limits)
        out.append(sample)
        prev = sample
    return out


# ---------------------------------------------------------------------------
# preintegration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreintegratedImu:
    """
    Relative motion terms between two keyframes, in the first body frame.

    ``jacobian`` is the 15x15 error-state transition; its columns 9:15 are
    the derivatives of (theta, alpha, beta) with respect to (b_a, b_g).
    """

    delta_t: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    bias_acc: np.ndarray
    bias_gyro: np.ndarray
    covariance: np.ndarray
    jacobian: np.ndarray
    samples: tuple = ()
    noise: ImuNoise = field(default_factory=ImuNoise)

    @property
    def rotation(self):
        return Rotation(self.gamma)

    @property
    def start_time(self):
        return self.samples[0].timestamp

    @property
    def end_time(self):
        return self.samples[-1].timestamp

    @cached_property
    def sqrt_information(self):
        cov = 0.5 * (self.covariance + self.covariance.T) + 1e-12 * np.eye(15)
        return np.linalg.cholesky(np.linalg.inv(cov)).T

    def corrected(self, bias_acc, bias_gyro):
        """First-order (alpha, beta, gamma) at another bias, no bound check."""
        dba = np.asarray(bias_acc) - self.bias_acc
        dbg = np.asarray(bias_gyro) - self.bias_gyro
        J = self.jacobian
        alpha = self.alpha + J[AL, BA] @ dba + J[AL, BG] @ dbg
        beta = self.beta + J[BE, BA] @ dba + J[BE, BG] @ dbg
        gamma = quat_multiply(self.gamma, so3_exp(J[TH, BG] @ dbg))
        return alpha, beta, gamma


def _as_arrays(samples):
    t = np.array([s.timestamp for s in samples], dtype=float)
    w = np.array([s.gyro for s in samples], dtype=float).reshape(-1, 3)
    a = np.array([s.accel for s in samples], dtype=float).reshape(-1, 3)
    return t, w, a


def preintegrate(samples, bias=(None, None), noise=None, with_covariance=True):
    """
    Midpoint preintegration of IMU samples.

    Args:
        samples (list): ImuSample, first and last bound the interval
        bias (tuple): linearization biases (b_a, b_g), zeros when None
        noise (ImuNoise): noise model for the covariance
        with_covariance (bool): skip covariance/Jacobians for pure propagation

    Returns:
        PreintegratedImu

    Raises:
        EmptyInterval: fewer than two samples or zero duration
        NonMonotonicTimestamps: timestamps not strictly increasing
    """
    samples = tuple(samples)
    if len(samples) < 2:
        raise EmptyInterval(f"preintegration needs at least 2 samples, got {len(samples)}")
    t, w, a = _as_arrays(samples)
    steps = np.diff(t)
    if np.any(steps <= 0):
        raise NonMonotonicTimestamps(f"IMU timestamps not increasing at index {int(np.argmax(steps <= 0)) + 1}")
    noise = noise or ImuNoise()
    ba = np.zeros(3) if bias[0] is None else np.asarray(bias[0], dtype=float)
    bg = np.zeros(3) if bias[1] is None else np.asarray(bias[1], dtype=float)

    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    R = np.eye(3)
    alpha = np.zeros(3)
    beta = np.zeros(3)
    jac = np.eye(15)
    cov = np.zeros((15, 15))
    I3 = np.eye(3)

    for k, dt in enumerate(steps):
        w_mid = 0.5 * (w[k] + w[k + 1]) - bg
        a0 = a[k] - ba
        a1 = a[k + 1] - ba
        phi = w_mid * dt
        dq = so3_exp(phi)
        gamma_next = quat_multiply(gamma, dq)
        gamma_next /= np.linalg.norm(gamma_next)
        R_next = quat_to_matrix(gamma_next)
        acc_mid = 0.5 * (R @ a0 + R_next @ a1)
        alpha = alpha + beta * dt + 0.5 * acc_mid * dt * dt
        beta = beta + acc_mid * dt

        if with_covariance:
            Rd = quat_to_matrix(dq)
            Jr_dt = right_jacobian(phi) * dt
            A1 = -R_next @ skew(a1)
            dacc_dth = 0.5 * (-R @ skew(a0) + A1 @ Rd.T)
            dacc_dba = -0.5 * (R + R_next)
            dacc_dbg = -0.5 * A1 @ Jr_dt

            F = np.eye(15)
            F[TH, TH] = Rd.T
            F[TH, BG] = -Jr_dt
            F[AL, TH] = 0.5 * dt * dt * dacc_dth
            F[AL, BE] = I3 * dt
            F[AL, BA] = 0.5 * dt * dt * dacc_dba
            F[AL, BG] = 0.5 * dt * dt * dacc_dbg
            F[BE, TH] = dt * dacc_dth
            F[BE, BA] = dt * dacc_dba
            F[BE, BG] = dt * dacc_dbg

            # noise order: n_a0, n_g0, n_a1, n_g1, n_ba, n_bg
            G = np.zeros((15, 18))
            dth_dng = -0.5 * Jr_dt
            dacc = [-0.5 * R, 0.5 * A1 @ dth_dng, -0.5 * R_next, 0.5 * A1 @ dth_dng]
            for j, block in enumerate(dacc):
                cols = slice(3 * j, 3 * j + 3)
                G[AL, cols] = 0.5 * dt * dt * block
                G[BE, cols] = dt * block
            G[TH, 3:6] = dth_dng
            G[TH, 9:12] = dth_dng
            G[BA, 12:15] = I3
            G[BG, 15:18] = I3
            V = np.diag(np.repeat([
                noise.accel_noise ** 2 / dt, noise.gyro_noise ** 2 / dt,
                noise.accel_noise ** 2 / dt, noise.gyro_noise ** 2 / dt,
                noise.accel_walk ** 2 * dt, noise.gyro_walk ** 2 * dt,
            ], 3))
            cov = F @ cov @ F.T + G @ V @ G.T
            jac = F @ jac

        gamma, R = gamma_next, R_next

    return PreintegratedImu(float(t[-1] - t[0]), alpha, beta, gamma, ba.copy(), bg.copy(),
                            cov, jac, samples, noise)


def correct_for_bias(preint, bias_acc, bias_gyro, max_delta=0.1):
    """
    First-order update of (alpha, beta, gamma) to a new linearization bias.

    Raises:
        BiasDeltaTooLarge: if either bias moves by more than ``max_delta``
    """
    dba = np.linalg.norm(np.asarray(bias_acc) - preint.bias_acc)
    dbg = np.linalg.norm(np.asarray(bias_gyro) - preint.bias_gyro)
    if max(dba, dbg) > max_delta:
        raise BiasDeltaTooLarge(f"bias change ({dba:.3g}, {dbg:.3g}) exceeds {max_delta}")
    alpha, beta, gamma = preint.corrected(bias_acc, bias_gyro)
    return replace(preint, alpha=alpha, beta=beta, gamma=gamma,
                   bias_acc=np.asarray(bias_acc, dtype=float).copy(),
                   bias_gyro=np.asarray(bias_gyro, dtype=float).copy())


def reintegrate(preint, bias_acc, bias_gyro):
    """Full re-integration of the stored samples at a new bias."""
    return preintegrate(preint.samples, (bias_acc, bias_gyro), preint.noise)


def combine(first, second):
    """
    Compose two contiguous preintegrations into one.

    ``second`` is first brought to the linearization bias of ``first``.
    """
    if abs(first.end_time - second.start_time) > 1e-9:
        raise ImuError("preintegrations to combine are not contiguous")
    a2, b2, g2 = second.corrected(first.bias_acc, first.bias_gyro)
    R1 = quat_to_matrix(first.gamma)
    R2 = quat_to_matrix(g2)
    dt2 = second.delta_t

    alpha = first.alpha + first.beta * dt2 + R1 @ a2
    beta = first.beta + R1 @ b2
    gamma = quat_multiply(first.gamma, g2)

    A = np.eye(15)
    A[TH, TH] = R2.T
    A[AL, TH] = -R1 @ skew(a2)
    A[AL, BE] = dt2 * np.eye(3)
    A[BE, TH] = -R1 @ skew(b2)
    B = np.zeros((15, 15))
    B[TH, TH] = np.eye(3)
    B[AL, AL] = R1
    B[BE, BE] = R1
    B[BA, BA] = np.eye(3)
    B[BG, BG] = np.eye(3)
    cov = A @ first.covariance @ A.T + B @ second.covariance @ B.T
    jac = A @ first.jacobian
    jac[0:9, 9:15] += (B @ second.jacobian)[0:9, 9:15]

    return PreintegratedImu(first.delta_t + dt2, alpha, beta, gamma / np.linalg.norm(gamma),
                            first.bias_acc, first.bias_gyro, cov, jac,
                            first.samples + second.samples[1:], first.noise)


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def predict_state(state, preint, gravity):
    """State at the end of ``preint`` given the state at its start."""
    alpha, beta, gamma = preint.corrected(state.bias_acc, state.bias_gyro)
    R = state.rotation.matrix()
    dt = preint.delta_t
    g = gravity.vector
    return KeyframeState(
        state.timestamp + dt,
        state.position + state.velocity * dt + 0.5 * g * dt * dt + R @ alpha,
        state.velocity + g * dt + R @ beta,
        state.rotation * Rotation(gamma),
        state.bias_acc.copy(),
        state.bias_gyro.copy(),
    )


def propagate_state(state, gravity, samples):
    """
    Dead-reckon ``state`` through ``samples`` with midpoint integration.

    Raises:
        EmptyInterval, NonMonotonicTimestamps: as ``preintegrate``
    """
    preint = preintegrate(samples, (state.bias_acc, state.bias_gyro), with_covariance=False)
    return predict_state(state, preint, gravity)


# ---------------------------------------------------------------------------
# residual
# ---------------------------------------------------------------------------

def imu_residual(preint, state_i, state_j, gravity):
    """15-vector (e_R, e_p, e_v, e_ba, e_bg) between two keyframe states."""
    alpha, beta, gamma = preint.corrected(state_i.bias_acc, state_i.bias_gyro)
    dt = preint.delta_t
    g = gravity.vector
    Ri_T = state_i.rotation.matrix().T
    q_err = quat_multiply(quat_conjugate(gamma), quat_multiply(quat_conjugate(state_i.rotation.q), state_j.rotation.q))
    residual = np.empty(15)
    residual[0:3] = 2.0 * q_err[1:]
    residual[3:6] = Ri_T @ (state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g * dt * dt) - alpha
    residual[6:9] = Ri_T @ (state_j.velocity - state_i.velocity - g * dt) - beta
    residual[9:12] = state_j.bias_acc - state_i.bias_acc
    residual[12:15] = state_j.bias_gyro - state_i.bias_gyro
    return residual


def imu_residual_jacobians(preint, state_i, state_j, gravity):
    """
    Analytic Jacobians of ``imu_residual`` (rotations in right-perturbation
    tangent coordinates).

    Returns:
        dict: keys p_i, q_i, v_i, ba_i, bg_i, p_j, q_j, v_j, ba_j, bg_j, g;
            each a 15x3 matrix
    """
    J = preint.jacobian
    dt = preint.delta_t
    g = gravity.vector
    dbg = state_i.bias_gyro - preint.bias_gyro
    theta = J[TH, BG] @ dbg
    gamma = quat_multiply(preint.gamma, so3_exp(theta))
    qi_inv_qj = quat_multiply(quat_conjugate(state_i.rotation.q), state_j.rotation.q)
    q_err = quat_multiply(quat_conjugate(gamma), qi_inv_qj)
    Ri_T = state_i.rotation.matrix().T
    dp = state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g * dt * dt
    dv = state_j.velocity - state_i.velocity - g * dt
    I3 = np.eye(3)
    Z = np.zeros((3, 3))

    rest = quat_multiply(quat_conjugate(preint.gamma), qi_inv_qj)
    d_rot_dbg = -(quat_left(so3_exp(-theta)) @ quat_right(rest))[1:, 1:] @ right_jacobian(-theta) @ J[TH, BG]

    return {
        "p_i": np.vstack([Z, -Ri_T, Z, Z, Z]),
        "q_i": np.vstack([-(quat_left(quat_conjugate(gamma)) @ quat_right(qi_inv_qj))[1:, 1:],
                          skew(Ri_T @ dp), skew(Ri_T @ dv), Z, Z]),
        "v_i": np.vstack([Z, -Ri_T * dt, -Ri_T, Z, Z]),
        "ba_i": np.vstack([Z, -J[AL, BA], -J[BE, BA], -I3, Z]),
        "bg_i": np.vstack([d_rot_dbg, -J[AL, BG], -J[BE, BG], Z, -I3]),
        "p_j": np.vstack([Z, Ri_T, Z, Z, Z]),
        "q_j": np.vstack([quat_left(q_err)[1:, 1:], Z, Z, Z, Z]),
        "v_j": np.vstack([Z, Z, Ri_T, Z, Z]),
        "ba_j": np.vstack([Z, Z, Z, I3, Z]),
        "bg_j": np.vstack([Z, Z, Z, Z, I3]),
        "g": np.vstack([Z, -0.5 * dt * dt * Ri_T, -dt * Ri_T, Z, Z]),
    }


def state_from_blocks(position, rotation, speed_bias, timestamp=0.0):
    return KeyframeState(timestamp, position, speed_bias[0:3], Rotation(rotation), speed_bias[3:6], speed_bias[6:9])


class ImuFactor(Factor):
    """
    Preintegration factor between two keyframes.

    Blocks: position_i, rotation_i, speedbias_i, position_j, rotation_j,
    speedbias_j and optionally a Euclidean gravity block.
    """

    def __init__(self, preint, block_ids, gravity=None, sqrt_information=None):
        super().__init__(block_ids)
        self.preint = preint
        self.gravity = gravity or GravityVector()
        self.sqrt_info = preint.sqrt_information if sqrt_information is None else np.asarray(sqrt_information)

    def evaluate(self, values, jacobians=True):
        state_i = state_from_blocks(values[0], values[1], values[2])
        state_j = state_from_blocks(values[3], values[4], values[5])
        gravity = GravityVector(values[6]) if len(values) > 6 else self.gravity
        residual = self.sqrt_info @ imu_residual(self.preint, state_i, state_j, gravity)
        if not jacobians:
            return residual, None
        D = imu_residual_jacobians(self.preint, state_i, state_j, gravity)
        blocks = [
            D["p_i"], D["q_i"], np.hstack([D["v_i"], D["ba_i"], D["bg_i"]]),
            D["p_j"], D["q_j"], np.hstack([D["v_j"], D["ba_j"], D["bg_j"]]),
        ]
        if len(values) > 6:
            blocks.append(D["g"])
        return residual, [self.sqrt_info @ B for B in blocks]
