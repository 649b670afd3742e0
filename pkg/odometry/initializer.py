"""
Stereo-Inertial Odometry - Initialization

The three-mode machine (ImuOnly, VisualOnly, VisualInertial) and the steps
that move the estimator along it:

1. visual initialization from stereo (3D) features only, PnP for the later
   keyframes and a reprojection-only bundle adjustment
2. visual-IMU alignment: gyroscope bias from visual rotations, gravity and
   velocities from a linear system, gravity refined on its sphere
3. two loosely coupled solves tying the camera chain to the IMU chain; the
   alignment is accepted only when the second solve barely moves the first

Accelerometer bias stays at zero until the tightly coupled window takes over.

License: MIT
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from odometry.backend import (
    STEREO_MIN_PARALLAX_DEG,
    BackendSettings,
    ReprojectionBatch,
    VisualFactorKind,
    WindowState,
    anchor_landmark,
    build_blocks,
    build_factors,
    build_visual_factors,
    commit_blocks,
    landmark_pixel_errors,
)
from odometry.errors import (
    GeometryError,
    HighResidual,
    IllConditioned,
    InsufficientFeatures,
    PnpFailure,
    RankDeficient,
)
from odometry.geometry import (
    Rotation,
    Transform,
    pnp_ransac,
    quat_conjugate,
    quat_error_jacobians,
    quat_multiply,
    quat_to_matrix,
    skew,
    triangulate,
)
from odometry.imu import AL, BA, BE, BG, TH, STANDARD_GRAVITY, GravityVector, ImuFactor, KeyframeState, reintegrate
from odometry.optimizer import Factor, HuberLoss, Manifold, ParameterBlock, evaluate_cost, solve, yaw_frozen_basis

logger = logging.getLogger(__name__)


class TrackingMode(Enum):
    IMU_ONLY = "ImuOnly"
    VISUAL_ONLY = "VisualOnly"
    VISUAL_INERTIAL = "VisualInertial"


class ModeEvent(Enum):
    VISUAL_INIT_FAILED = "VisualInitFailed"
    VISUAL_INIT_OK = "VisualInitOk"
    ALIGNMENT_FAILED = "AlignmentFailed"
    ALIGNMENT_CONVERGED = "AlignmentConverged"
    TRACKING_LOST = "TrackingLost"


def step_mode(current, events):
    """
    Next tracking mode.

    ImuOnly needs a visual initialization to leave; VisualOnly needs a
    converged alignment; a total tracking loss drops any mode to ImuOnly.

    Args:
        current (TrackingMode): mode before the events
        events: a ModeEvent or an iterable of them

    Returns:
        TrackingMode
    """
    events = {events} if isinstance(events, ModeEvent) else set(events)
    if ModeEvent.TRACKING_LOST in events:
        return TrackingMode.IMU_ONLY
    if current is TrackingMode.IMU_ONLY:
        return TrackingMode.VISUAL_ONLY if ModeEvent.VISUAL_INIT_OK in events else TrackingMode.IMU_ONLY
    if current is TrackingMode.VISUAL_ONLY:
        if ModeEvent.ALIGNMENT_CONVERGED in events:
            return TrackingMode.VISUAL_INERTIAL
        return TrackingMode.VISUAL_ONLY
    return TrackingMode.VISUAL_INERTIAL


@dataclass(frozen=True)
class InitSettings:
    window_size: int = 10
    min_stereo_features: int = 20
    max_reprojection_px: float = 2.0
    gyro_rank_tolerance: float = 1e-3
    max_condition_number: float = 1e8
    gravity_tolerance: float = 0.2
    max_alignment_residual: float = 0.5
    stationary_translation: float = 0.02
    stationary_gyro: float = 0.02
    loose_max_translation: float = 0.1
    loose_max_rotation_deg: float = 0.5
    loose_max_imu_cost: float = 1500.0
    force_first_alignment: bool = False
    pnp_threshold_px: float = 2.0
    pnp_confidence: float = 0.99
    pnp_max_iterations: int = 200
    pnp_min_inlier_ratio: float = 0.5
    seed: int = 0
    backend: BackendSettings = field(default_factory=BackendSettings)

    @classmethod
    def from_config(cls, cfg):
        return cls(
            window_size=cfg["init.window_size"],
            min_stereo_features=cfg["init.min_stereo_features"],
            max_reprojection_px=cfg["init.max_reprojection_px"],
            gyro_rank_tolerance=cfg["init.gyro_rank_tolerance"],
            max_condition_number=cfg["init.max_condition_number"],
            gravity_tolerance=cfg["init.gravity_tolerance"],
            max_alignment_residual=cfg["init.max_alignment_residual"],
            stationary_translation=cfg["init.stationary_translation"],
            stationary_gyro=cfg["init.stationary_gyro"],
            loose_max_translation=cfg["init.loose_max_translation"],
            loose_max_rotation_deg=cfg["init.loose_max_rotation_deg"],
            loose_max_imu_cost=cfg["init.loose_max_imu_cost"],
            force_first_alignment=cfg["init.force_first_alignment"],
            pnp_threshold_px=cfg["geometry.pnp_threshold_px"],
            pnp_confidence=cfg["geometry.pnp_confidence"],
            pnp_max_iterations=cfg["geometry.pnp_max_iterations"],
            pnp_min_inlier_ratio=cfg["geometry.pnp_min_inlier_ratio"],
            seed=cfg["run.seed"],
            backend=BackendSettings.from_config(cfg),
        )


# ---------------------------------------------------------------------------
# visual initialization
# ---------------------------------------------------------------------------

@dataclass
class VisualInitResult:
    """
    Camera chain of the initialization window: ``chain`` is a WindowState
    whose keyframe states are left-camera poses (identity extrinsic).
    """

    chain: WindowState
    mean_error_px: float
    rejected: int = 0

    @property
    def camera_poses(self):
        return {kf: self.chain.states[kf].pose for kf in self.chain.keyframe_ids}

    def body_window(self, rig):
        """The same keyframes as a visual-only body-frame window."""
        window = WindowState(rig, use_imu=False)
        T_left_body = rig.T_body_left.inverse()
        for kf in self.chain.keyframe_ids:
            s = self.chain.states[kf]
            pose = s.pose * T_left_body
            window.add_keyframe(kf, KeyframeState(s.timestamp, pose.translation, np.zeros(3), pose.rotation),
                                self.chain.features[kf])
        window.landmarks = {lid: lm.copy() for lid, lm in self.chain.landmarks.items()}
        return window


def _stereo_points(frame, T_wc, rig, known):
    points = {}
    for obs in frame.stereo:
        if obs.feature_id in known:
            continue
        try:
            point_l, _ = triangulate(Transform.identity(), rig.T_left_right, obs.left_bearing, obs.right_bearing,
                                     STEREO_MIN_PARALLAX_DEG)
        except GeometryError:
            continue
        points[obs.feature_id] = T_wc.apply(point_l)
    return points


def visual_initialize(frames, rig, settings=InitSettings(), first_camera_pose=None):
    """
    Recover the camera chain of a window from its stereo features.

    Args:
        frames (list): StereoFrameFeatures of the keyframes, oldest first
        rig (StereoRig): calibration
        settings (InitSettings): thresholds
        first_camera_pose (Transform): T_w_c of the first keyframe, identity if None

    Returns:
        VisualInitResult

    Raises:
        InsufficientFeatures: fewer than 2 keyframes, or a keyframe below
            ``min_stereo_features`` stereo features
        PnpFailure: a keyframe pose could not be found
        HighResidual: mean reprojection error after adjustment too high
    """
    if len(frames) < 2:
        raise InsufficientFeatures(f"visual initialization needs 2 keyframes, got {len(frames)}")
    for frame in frames:
        if len(frame.stereo) < settings.min_stereo_features:
            raise InsufficientFeatures(f"keyframe {frame.frame_id} has {len(frame.stereo)} stereo features, "
                                       f"{settings.min_stereo_features} needed")

    chain = WindowState(rig, use_imu=False, T_body_left=Transform.identity())
    points = {}
    histories = {}
    rejected = 0
    for k, frame in enumerate(frames):
        if k == 0:
            T_wc = first_camera_pose or Transform.identity()
            inliers = frame.stereo
        else:
            known = [o for o in frame.stereo if o.feature_id in points]
            try:
                T_wc, mask = pnp_ransac(
                    np.array([points[o.feature_id] for o in known]).reshape(-1, 3),
                    np.array([o.left_bearing for o in known]).reshape(-1, 3),
                    focal_px=rig.left.focal, threshold_px=settings.pnp_threshold_px,
                    confidence=settings.pnp_confidence, max_iterations=settings.pnp_max_iterations,
                    min_inlier_ratio=settings.pnp_min_inlier_ratio, seed=settings.seed)
            except GeometryError as exc:
                raise PnpFailure(f"keyframe {frame.frame_id}: {exc}") from exc
            inliers = [o for o, ok in zip(known, mask) if ok]
            inliers += [o for o in frame.stereo if o.feature_id not in points]
            rejected += int(len(known) - mask.sum())
        chain.add_keyframe(frame.frame_id, KeyframeState(frame.timestamp, T_wc.translation, np.zeros(3),
                                                         T_wc.rotation), frame)
        points.update(_stereo_points(frame, T_wc, rig, points))
        for obs in inliers:
            if obs.feature_id in points:
                histories.setdefault(obs.feature_id, []).append((frame.frame_id, obs))

    for fid, history in histories.items():
        landmark = anchor_landmark(chain, fid, points[fid], history, True)
        if landmark is not None:
            chain.landmarks[fid] = landmark

    backend = replace(settings.backend, estimate_extrinsic=False)
    blocks = build_blocks(chain, backend)
    solve(blocks, build_factors(chain, VisualFactorKind.STEREO_ONLY, backend),
          max_iterations=backend.max_iterations, tolerance=backend.tolerance,
          initial_damping=backend.initial_damping)
    commit_blocks(chain, blocks)

    errors = landmark_pixel_errors(chain)
    for lid, err in errors.items():
        if err > backend.outlier_threshold_px:
            del chain.landmarks[lid]
            rejected += 1
    kept = [err for lid, err in errors.items() if lid in chain.landmarks]
    mean_error = float(np.mean(kept)) if kept else np.inf
    if mean_error > settings.max_reprojection_px:
        raise HighResidual(f"mean reprojection error {mean_error:.2f} px after adjustment")
    logger.info("visual initialization over %d keyframes: %d landmarks, %.3f px mean error",
                len(frames), len(chain.landmarks), mean_error)
    return VisualInitResult(chain, mean_error, rejected)


# ---------------------------------------------------------------------------
# gyroscope bias
# ---------------------------------------------------------------------------

def rotation_discrepancy(rotations, preints):
    """Sum of squared angles between visual and preintegrated relative rotations."""
    total = 0.0
    for r_i, r_j, pre in zip(rotations[:-1], rotations[1:], preints):
        err = quat_multiply(quat_conjugate(pre.gamma), (r_i.inverse() * r_j).q)
        total += float(np.sum((2.0 * err[1:]) ** 2))
    return total


def estimate_gyro_bias(rotations, preints, rank_tolerance=1e-3, check_rank=True, iterations=2):
    """
    Gyroscope bias that best explains the visual relative rotations.

    Args:
        rotations (list): body attitudes (Rotation) of consecutive keyframes
        preints (list): preintegrations, ``preints[k]`` from keyframe k to k+1
        rank_tolerance (float): floor on the second singular value of the
            stacked relative rotation vectors (rad)
        check_rank (bool): False skips the excitation test
        iterations (int): Gauss-Newton passes, re-integrating after each

    Returns:
        tuple: (gyro bias, preintegrations re-integrated at that bias)

    Raises:
        RankDeficient: fewer than two pairs, or rotations about a single axis
    """
    if len(preints) < 2 or len(rotations) != len(preints) + 1:
        raise RankDeficient(f"gyro calibration needs at least 2 keyframe pairs, got {len(preints)}")
    relative = [r_i.inverse() * r_j for r_i, r_j in zip(rotations[:-1], rotations[1:])]
    if check_rank:
        singular = np.linalg.svd(np.array([rel.log() for rel in relative]), compute_uv=False)
        if len(singular) < 2 or singular[1] < rank_tolerance:
            raise RankDeficient(f"rotations excite a single axis (second singular value "
                                f"{singular[1] if len(singular) > 1 else 0.0:.2e} rad)")

    bias = np.array(preints[0].bias_gyro, dtype=float)
    for _ in range(iterations):
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for rel, pre in zip(relative, preints):
            _, _, gamma = pre.corrected(pre.bias_acc, bias)
            J = pre.jacobian[TH, BG]
            r = 2.0 * quat_multiply(quat_conjugate(gamma), rel.q)[1:]
            A += J.T @ J
            b += J.T @ r
        bias = bias + np.linalg.solve(A, b)
        preints = [reintegrate(pre, pre.bias_acc, bias) for pre in preints]
    logger.debug("gyro bias estimate %s", np.array2string(bias, precision=5))
    return bias, preints


# ---------------------------------------------------------------------------
# gravity / velocity alignment
# ---------------------------------------------------------------------------

@dataclass
class AlignmentResult:
    gravity: GravityVector
    velocities: list
    gyro_bias: np.ndarray
    success: bool
    residual: float
    condition_number: float = 0.0
    stationary: bool = False


def is_stationary(preints, body_poses, settings=InitSettings()):
    """Visual translation and bias-free rotation rate both below their floors."""
    origin = body_poses[0].translation
    travel = max(np.linalg.norm(T.translation - origin) for T in body_poses)
    rates = [np.linalg.norm(s.gyro - pre.bias_gyro) for pre in preints for s in pre.samples]
    return travel < settings.stationary_translation and float(np.mean(rates)) < settings.stationary_gyro


def _tangent_basis(direction):
    _, _, Vt = np.linalg.svd(np.asarray(direction, dtype=float)[None, :])
    return Vt[1:].T


def _alignment_system(preints, body_poses, with_accel_bias=False):
    """
    Rows of the preintegration equations in the unknowns
    [v_0 .. v_n (world), g (world), (b_a)].
    """
    n = len(body_poses)
    cols = 3 * n + 3 + (3 if with_accel_bias else 0)
    A = np.zeros((6 * (n - 1), cols))
    b = np.zeros(6 * (n - 1))
    g0 = 3 * n
    for k, pre in enumerate(preints):
        Ri_T = body_poses[k].rotation.matrix().T
        dt = pre.delta_t
        rows = slice(6 * k, 6 * k + 3)
        A[rows, 3 * k:3 * k + 3] = -Ri_T * dt
        A[rows, g0:g0 + 3] = -0.5 * dt * dt * Ri_T
        b[rows] = pre.alpha - Ri_T @ (body_poses[k + 1].translation - body_poses[k].translation)
        rows = slice(6 * k + 3, 6 * k + 6)
        A[rows, 3 * k:3 * k + 3] = -Ri_T
        A[rows, 3 * k + 3:3 * k + 6] = Ri_T
        A[rows, g0:g0 + 3] = -dt * Ri_T
        b[rows] = pre.beta
        if with_accel_bias:
            A[6 * k:6 * k + 3, g0 + 3:] = -pre.jacobian[AL, BA]
            A[6 * k + 3:6 * k + 6, g0 + 3:] = -pre.jacobian[BE, BA]
    return A, b


def _solve_known_gravity(A, b, n, gravity):
    g0 = 3 * n
    rhs = b - A[:, g0:g0 + 3] @ gravity
    v = np.linalg.lstsq(A[:, :g0], rhs, rcond=None)[0]
    x = np.concatenate([v, gravity])
    return x, float(np.sqrt(np.mean((A[:, :g0 + 3] @ x - b) ** 2)))


def align_gravity_velocity(preints, body_poses, settings=InitSettings(), known_gravity=None):
    """
    Gravity and keyframe velocities from the preintegrated motion and the
    visual body poses.

    A stationary window uses the mean specific force with zero velocities.
    A moving window solves the linear system; its observability is judged
    on the system augmented with the accelerometer bias. Gravity is then
    refined on the sphere of radius 9.80665.

    Args:
        preints (list): preintegrations between consecutive keyframes (gyro bias applied)
        body_poses (list): T_w_b of the keyframes from vision
        settings (InitSettings): thresholds; ``force_first_alignment`` accepts
            ill-conditioned and out-of-tolerance solutions
        known_gravity (np.ndarray): solve for velocities only

    Returns:
        AlignmentResult: gravity and velocities in the frame of ``body_poses``

    Raises:
        IllConditioned: augmented normal matrix condition number above the limit
    """
    n = len(body_poses)
    forced = settings.force_first_alignment
    bias = np.array(preints[0].bias_gyro, dtype=float)
    A, b = _alignment_system(preints, body_poses)

    if known_gravity is not None:
        x, residual = _solve_known_gravity(A, b, n, np.asarray(known_gravity, dtype=float))
        return AlignmentResult(GravityVector(known_gravity), list(x[:3 * n].reshape(n, 3)), bias,
                               residual < settings.max_alignment_residual or forced, residual)

    if is_stationary(preints, body_poses, settings):
        estimates = [-body_poses[k].rotation.apply(pre.beta) / pre.delta_t for k, pre in enumerate(preints)]
        g_raw = np.mean(estimates, axis=0)
        magnitude_ok = abs(np.linalg.norm(g_raw) - STANDARD_GRAVITY) < settings.gravity_tolerance * STANDARD_GRAVITY
        gravity = GravityVector.from_direction(g_raw)
        x, residual = _solve_known_gravity(A, b, n, gravity.vector)
        x[:3 * n] = 0.0
        residual = float(np.sqrt(np.mean((A @ x - b) ** 2)))
        success = forced or (magnitude_ok and residual < settings.max_alignment_residual)
        logger.info("stationary alignment: |g| %.3f, residual %.4f", np.linalg.norm(g_raw), residual)
        return AlignmentResult(gravity, [np.zeros(3) for _ in range(n)], bias, success, residual, 0.0, True)

    A_aug, _ = _alignment_system(preints, body_poses, with_accel_bias=True)
    condition = float(np.linalg.cond(A_aug.T @ A_aug))
    if condition > settings.max_condition_number and not forced:
        raise IllConditioned(f"alignment normal matrix condition number {condition:.3g}", condition)

    x = np.linalg.lstsq(A, b, rcond=None)[0]
    g_raw = x[3 * n:]
    magnitude_ok = abs(np.linalg.norm(g_raw) - STANDARD_GRAVITY) < settings.gravity_tolerance * STANDARD_GRAVITY

    direction = g_raw / np.linalg.norm(g_raw)
    for _ in range(4):
        B = _tangent_basis(direction)
        g_fixed = STANDARD_GRAVITY * direction
        A_t = np.hstack([A[:, :3 * n], A[:, 3 * n:] @ B])
        y = np.linalg.lstsq(A_t, b - A[:, 3 * n:] @ g_fixed, rcond=None)[0]
        g = g_fixed + B @ y[3 * n:]
        direction = g / np.linalg.norm(g)
    gravity = GravityVector.from_direction(direction)
    x, residual = _solve_known_gravity(A, b, n, gravity.vector)

    success = forced or (magnitude_ok and residual < settings.max_alignment_residual)
    logger.info("gravity/velocity alignment: |g_raw| %.3f, residual %.4f, condition %.3g",
                np.linalg.norm(g_raw), residual, condition)
    return AlignmentResult(gravity, list(x[:3 * n].reshape(n, 3)), bias, success, residual, condition)


def gravity_rotation(gravity_vector):
    """Smallest rotation taking ``gravity_vector`` onto (0, 0, -|g|)."""
    u = np.asarray(gravity_vector, dtype=float)
    u = u / np.linalg.norm(u)
    target = np.array([0.0, 0.0, -1.0])
    axis = np.cross(u, target)
    s = np.linalg.norm(axis)
    angle = np.arctan2(s, u @ target)
    if s < 1e-12:
        return Rotation.identity() if angle < 1.0 else Rotation.exp(np.array([np.pi, 0.0, 0.0]))
    return Rotation.exp(axis / s * angle)


# ---------------------------------------------------------------------------
# loosely coupled adjustment
# ---------------------------------------------------------------------------

class ExtrinsicConsistencyFactor(Factor):
    """
    Ties a camera-chain pose to the body-chain pose of the same keyframe:
    r = [p_b + R_b t_bc - p_c ; 2 vec((q_b q_bc)^-1 q_c)].

    Blocks: p_camera, q_camera, p_body, q_body, t_bc, q_bc.
    """

    def evaluate(self, values, jacobians=True):
        p_c, q_c, p_b, q_b, t_bc, q_bc = values
        R_b = quat_to_matrix(q_b)
        e_q, J_a, J_qc = quat_error_jacobians(quat_multiply(q_b, q_bc), q_c)
        residual = np.concatenate([p_b + R_b @ t_bc - p_c, e_q])
        if not jacobians:
            return residual, None
        Z = np.zeros((3, 3))
        I3 = np.eye(3)
        R_bc = quat_to_matrix(q_bc)
        return residual, [
            np.vstack([-I3, Z]),
            np.vstack([Z, J_qc]),
            np.vstack([I3, Z]),
            np.vstack([-R_b @ skew(t_bc), J_a @ R_bc.T]),
            np.vstack([R_b, Z]),
            np.vstack([Z, J_a]),
        ]


@dataclass
class LooseState:
    """Camera chain and IMU chain of the initialization window."""

    keyframe_ids: list
    camera_poses: dict
    body_states: dict
    landmarks: dict
    T_body_left: Transform
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_window(cls, window):
        return cls(list(window.keyframe_ids),
                   {kf: window.camera_pose(kf) for kf in window.keyframe_ids},
                   {kf: window.states[kf].copy() for kf in window.keyframe_ids},
                   {lid: lm.copy() for lid, lm in window.landmarks.items()},
                   window.T_body_left,
                   window.states[window.keyframe_ids[0]].bias_acc.copy(),
                   window.states[window.keyframe_ids[0]].bias_gyro.copy())

    def max_pose_difference(self, other):
        """Worst (m, deg) camera pose change between two states."""
        diffs = [self.camera_poses[kf].distance_to(other.camera_poses[kf]) for kf in self.keyframe_ids]
        return max(d[0] for d in diffs), max(d[1] for d in diffs)


def loosely_coupled_ba(state, preints, rig, settings=InitSettings(), gravity=None):
    """
    One solve of reprojection, preintegration and camera/body consistency
    terms over the initialization window.

    Args:
        state (LooseState): start values
        preints (dict): keyframe id -> preintegration to the next keyframe
        rig (StereoRig): calibration
        settings (InitSettings): thresholds
        gravity (GravityVector): world gravity, standard when None

    Returns:
        tuple: (LooseState, converged) where converged means the solve moved
            no camera pose by more than the loose thresholds and the mean
            IMU cost stayed below its limit
    """
    gravity = gravity or GravityVector()
    backend = settings.backend
    ids = state.keyframe_ids
    blocks = {}
    # velocity and gyro bias free, accel bias held
    sb_basis = np.zeros((9, 6))
    sb_basis[0:3, 0:3] = np.eye(3)
    sb_basis[6:9, 3:6] = np.eye(3)
    for k, kf in enumerate(ids):
        T_c = state.camera_poses[kf]
        s = state.body_states[kf]
        blocks[("cp", kf)] = ParameterBlock(("cp", kf), T_c.translation, constant=k == 0)
        blocks[("cq", kf)] = ParameterBlock(("cq", kf), T_c.rotation.q, Manifold.ROTATION,
                                            subspace=yaw_frozen_basis(T_c.rotation.q) if k == 0 else None)
        blocks[("p", kf)] = ParameterBlock(("p", kf), s.position)
        blocks[("q", kf)] = ParameterBlock(("q", kf), s.rotation.q, Manifold.ROTATION)
        blocks[("sb", kf)] = ParameterBlock(("sb", kf), s.speed_bias, subspace=sb_basis)
    for lid, lm in state.landmarks.items():
        blocks[("l", lid)] = ParameterBlock(("l", lid), [lm.inverse_depth], Manifold.INVERSE_DEPTH)
    blocks[("tbc",)] = ParameterBlock(("tbc",), state.T_body_left.translation, constant=not backend.estimate_extrinsic)
    blocks[("qbc",)] = ParameterBlock(("qbc",), state.T_body_left.rotation.q, Manifold.ROTATION,
                                      constant=not backend.estimate_extrinsic)
    blocks[("tid",)] = ParameterBlock(("tid",), np.zeros(3), constant=True)
    blocks[("qid",)] = ParameterBlock(("qid",), [1.0, 0.0, 0.0, 0.0], Manifold.ROTATION, constant=True)

    chain = WindowState(rig, use_imu=False, T_body_left=Transform.identity())
    chain.keyframe_ids = list(ids)
    chain.states = {kf: KeyframeState(0.0, state.camera_poses[kf].translation, np.zeros(3),
                                      state.camera_poses[kf].rotation) for kf in ids}
    chain.landmarks = state.landmarks
    visual = build_visual_factors(chain, VisualFactorKind.STEREO_PLUS_LEFT_2D, backend)
    factors = []
    batch = ReprojectionBatch.from_factors(visual, rig, backend.pixel_sigma, HuberLoss(1.0),
                                           pose_keys=("cp", "cq"), extrinsic_ids=(("tid",), ("qid",)))
    if len(batch):
        factors.append(batch)
    imu = [ImuFactor(preints[a], [("p", a), ("q", a), ("sb", a), ("p", b), ("q", b), ("sb", b)], gravity)
           for a, b in zip(ids[:-1], ids[1:]) if a in preints]
    factors.extend(imu)
    factors.extend(ExtrinsicConsistencyFactor([("cp", kf), ("cq", kf), ("p", kf), ("q", kf), ("tbc",), ("qbc",)])
                   for kf in ids)
    report = solve(blocks, factors, max_iterations=backend.max_iterations, tolerance=backend.tolerance,
                   initial_damping=backend.initial_damping)

    result = LooseState(
        list(ids),
        {kf: Transform(Rotation(blocks[("cq", kf)].value), blocks[("cp", kf)].value.copy()) for kf in ids},
        {},
        {lid: replace(lm, inverse_depth=float(blocks[("l", lid)].value[0])) for lid, lm in state.landmarks.items()},
        Transform(Rotation(blocks[("qbc",)].value), blocks[("tbc",)].value.copy()),
    )
    for kf in ids:
        sb = blocks[("sb", kf)].value
        result.body_states[kf] = KeyframeState(state.body_states[kf].timestamp, blocks[("p", kf)].value.copy(),
                                               sb[0:3].copy(), Rotation(blocks[("q", kf)].value),
                                               sb[3:6].copy(), sb[6:9].copy())
    result.bias_acc = result.body_states[ids[0]].bias_acc.copy()
    result.bias_gyro = np.mean([result.body_states[kf].bias_gyro for kf in ids], axis=0)

    dt, dr = state.max_pose_difference(result)
    imu_cost = evaluate_cost(blocks, imu) / max(len(imu), 1)
    converged = (dt < settings.loose_max_translation and dr < settings.loose_max_rotation_deg
                 and imu_cost < settings.loose_max_imu_cost)
    logger.debug("loose solve: %s, pose change (%.4f m, %.4f deg), mean IMU cost %.3g",
                 report.termination.value, dt, dr, imu_cost)
    return result, converged


# ---------------------------------------------------------------------------
# full alignment
# ---------------------------------------------------------------------------

@dataclass
class AlignmentOutcome:
    """Result of one visual-IMU alignment attempt."""

    result: AlignmentResult = None
    window: WindowState = None
    frame_change: Transform = field(default_factory=Transform)
    reason: str = ""

    @property
    def converged(self):
        return self.window is not None


def visual_inertial_alignment(window, settings=InitSettings(), stored=None):
    """
    Move a visual-only window into a gravity-aligned visual-inertial one.

    Args:
        window (WindowState): visual-only body-frame window with preintegrations
        settings (InitSettings): thresholds
        stored (AlignmentResult): gyro bias from an earlier alignment; the
            window is then taken as already gravity-aligned and only
            velocities are re-estimated

    Returns:
        AlignmentOutcome: ``window`` is None unless the loose solves converged;
            ``frame_change`` maps the old world frame into the aligned one
    """
    ids = window.keyframe_ids
    if len(ids) < 3 or any(kf not in window.preints for kf in ids[:-1]):
        return AlignmentOutcome(reason="window lacks preintegrations")
    preints = [window.preints[kf] for kf in ids[:-1]]
    poses = [window.states[kf].pose for kf in ids]
    forced = settings.force_first_alignment

    try:
        if stored is not None:
            preints = [reintegrate(p, p.bias_acc, stored.gyro_bias) for p in preints]
            result = align_gravity_velocity(preints, poses, settings, known_gravity=GravityVector().vector)
            result.gyro_bias = stored.gyro_bias
        else:
            if is_stationary(preints, poses, settings):
                samples = [s.gyro for p in preints for s in p.samples]
                bias = np.mean(samples, axis=0)
                preints = [reintegrate(p, p.bias_acc, bias) for p in preints]
            else:
                rotations = [T.rotation for T in poses]
                bias, preints = estimate_gyro_bias(rotations, preints, settings.gyro_rank_tolerance,
                                                   check_rank=not forced)
            result = align_gravity_velocity(preints, poses, settings)
            result.gyro_bias = bias
    except (RankDeficient, IllConditioned) as exc:
        logger.info("alignment rejected: %s", exc)
        return AlignmentOutcome(reason=str(exc))
    if not result.success:
        return AlignmentOutcome(result, reason=f"alignment residual {result.residual:.3f}")

    R = gravity_rotation(result.gravity.vector)
    pivot = poses[0].translation
    frame_change = Transform(R, pivot - R.apply(pivot))
    aligned = window.copy()
    aligned.use_imu = True
    aligned.gravity = GravityVector()
    aligned.prior = None
    for kf, v in zip(ids, result.velocities):
        s = aligned.states[kf]
        pose = frame_change * s.pose
        aligned.states[kf] = KeyframeState(s.timestamp, pose.translation, R.apply(v), pose.rotation,
                                           np.zeros(3), result.gyro_bias.copy())
    aligned.preints = {kf: pre for kf, pre in zip(ids[:-1], preints)}

    loose = LooseState.from_window(aligned)
    first, _ = loosely_coupled_ba(loose, aligned.preints, window.rig, settings)
    second, converged = loosely_coupled_ba(first, aligned.preints, window.rig, settings)
    if not converged and not forced:
        return AlignmentOutcome(result, reason="loosely coupled solves did not converge")

    for kf in ids:
        s = second.body_states[kf]
        aligned.states[kf] = KeyframeState(s.timestamp, s.position, s.velocity, s.rotation,
                                           np.zeros(3), s.bias_gyro)
    aligned.landmarks = second.landmarks
    aligned.T_body_left = second.T_body_left
    logger.info("visual-inertial alignment converged over %d keyframes", len(ids))
    return AlignmentOutcome(result, aligned, frame_change)
