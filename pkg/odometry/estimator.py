"""
Stereo-Inertial Odometry - Estimator Pipeline

Drives one run frame by frame through the three tracking modes:

- ImuOnly: dead reckoning from the last known state; stereo keyframes are
  collected until a visual initialization succeeds
- VisualOnly: stereo VO (PnP against the window landmarks plus a
  reprojection-only window solve); visual-IMU alignment is attempted at
  every keyframe
- VisualInertial: tightly coupled window with dual-track solves,
  marginalization and loop-closure relocation

A total tracking loss drops any mode back to ImuOnly. Every frame gets a
pose, whatever the mode.

License: MIT
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from odometry.backend import (
    BackendSettings,
    VisualFactorKind,
    cap_landmarks,
    dual_estimate,
    manage_landmarks,
    marginalize_oldest,
    optimize_window,
)
from odometry.errors import EmptyInterval, GeometryError, InitializationError, NonMonotonicTimestamps
from odometry.frontend import KeyframeRule, KeyframeThresholds, select_keyframe
from odometry.geometry import Rotation, Transform, pnp_ransac
from odometry.imu import (
    GravityVector,
    KeyframeState,
    imu_noise,
    predict_state,
    preintegrate,
    saturate_stream,
    saturation_limits,
)
from odometry.initializer import (
    InitSettings,
    ModeEvent,
    TrackingMode,
    gravity_rotation,
    step_mode,
    visual_inertial_alignment,
    visual_initialize,
)
from odometry.loop_closure import LoopCloser, LoopSettings, relocation_optimize
from odometry.trajectory import TrajectoryEstimate, compute_ate, write_trajectory

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "frame_id", "timestamp", "mode", "is_keyframe", "keyframe_rule", "n_stereo", "n_left2d", "n_right2d",
    "solve_cost", "solve_ms", "escalated", "loop_keyframe",
]


@dataclass
class FrameLog:
    frame_id: int
    timestamp: float
    mode: str
    is_keyframe: bool
    keyframe_rule: str
    n_stereo: int
    n_left2d: int
    n_right2d: int
    solve_cost: float = None
    solve_ms: float = None
    escalated: bool = False
    loop_keyframe: int = None


class Estimator:
    """
    Per-frame odometry state machine.

    Args:
        rig (StereoRig): calibration of the source
        cfg (Config): run configuration
    """

    def __init__(self, rig, cfg):
        self.rig = rig
        self.cfg = cfg
        self.backend = BackendSettings.from_config(cfg)
        self.init = replace(InitSettings.from_config(cfg), backend=self.backend)
        self.thresholds = KeyframeThresholds(cfg["keyframe.max_interval_s"], cfg["keyframe.min_parallax_px"],
                                             cfg["keyframe.min_tracked"], rig.left.focal)
        self.noise = imu_noise(cfg)
        self.limits = saturation_limits(cfg)
        self.gravity = GravityVector.from_direction((0.0, 0.0, -1.0), cfg["imu.gravity"])
        self.min_features = cfg["tracking.min_features"]
        self.kind = VisualFactorKind.STEREO_PLUS_LEFT_2D
        self.loop = LoopCloser(rig, LoopSettings.from_config(cfg)) if cfg["loop.enabled"] else None

        self.mode = TrackingMode.IMU_ONLY
        self.trajectory = TrajectoryEstimate()
        self.log = []
        self.state = None
        self.window = None
        self.alignment = None
        self.last_keyframe = None
        self._last_sample = None
        self._kf_samples = []
        self._kf_gap = False
        self._init_keyframes = []
        self._segment_start = 0
        self._previous_pose = None

    # -- imu bookkeeping ----------------------------------------------------

    def _ingest_imu(self, frame):
        """Saturate the frame's samples; returns the samples spanning the frame interval."""
        samples = saturate_stream(frame.imu, self.limits, self._last_sample)
        span = []
        if frame.has_imu and samples:
            span = ([self._last_sample] if self._last_sample is not None else []) + samples
            if self._kf_samples or self._last_sample is None:
                self._kf_samples.extend(samples)
            else:
                self._kf_samples = span
        else:
            self._kf_gap = True
        if samples:
            self._last_sample = samples[-1]
        return span

    def _keyframe_preint(self, bias=(None, None), with_covariance=True):
        if self._kf_gap or len(self._kf_samples) < 2:
            return None
        try:
            return preintegrate(self._kf_samples, bias, self.noise, with_covariance)
        except (EmptyInterval, NonMonotonicTimestamps) as exc:
            logger.warning("skipping preintegration: %s", exc)
            return None

    def _reset_keyframe_samples(self):
        self._kf_samples = [self._last_sample] if self._last_sample is not None else []
        self._kf_gap = False

    def _camera_rotation(self):
        """Gyro rotation from the last keyframe's left camera to the current one."""
        bg = self.state.bias_gyro if self.state is not None else np.zeros(3)
        preint = self._keyframe_preint((None, bg), with_covariance=False)
        if preint is None:
            return None
        R_bc = self.rig.T_body_left.rotation
        return R_bc.inverse() * preint.rotation.inverse() * R_bc

    # -- per-frame entry ----------------------------------------------------

    def process(self, frame):
        """
        Consume one FrameInput and emit its pose.

        Returns:
            FrameLog
        """
        features = frame.features
        span = self._ingest_imu(frame)
        stereo, left2d, right2d = len(features.stereo), len(features.left2d), len(features.right2d)
        lost = len(features) < self.min_features
        if lost and self.mode is not TrackingMode.IMU_ONLY:
            logger.warning("frame %d: tracking lost (%d features), back to %s", frame.index, len(features),
                           TrackingMode.IMU_ONLY.value)
            self._enter_imu_only()

        depth = frozenset(self.window.landmarks) if self.window is not None else frozenset()
        decision = select_keyframe(features, self.last_keyframe, self._camera_rotation(), self.thresholds, depth)
        if lost:
            decision = replace(decision, is_keyframe=False, rule=KeyframeRule.NONE)
        entry = FrameLog(frame.index, frame.timestamp, self.mode.value, decision.is_keyframe, decision.rule.value,
                         stereo, left2d, right2d)

        if self.mode is TrackingMode.IMU_ONLY:
            self._imu_only(frame, span, decision, entry)
        elif self.mode is TrackingMode.VISUAL_ONLY:
            self._visual_only(frame, decision, entry)
        else:
            self._visual_inertial(frame, span, decision, entry)

        if decision.is_keyframe:
            self.last_keyframe = features
            self._reset_keyframe_samples()
        pose = self.state.pose if self.state is not None else Transform.identity()
        self.trajectory.append(frame.timestamp, pose, self.mode)
        self._previous_pose = (frame.timestamp, pose)
        entry.mode = self.mode.value
        self.log.append(entry)
        return entry

    def _enter_imu_only(self):
        self.mode = step_mode(self.mode, ModeEvent.TRACKING_LOST)
        self.window = None
        self._init_keyframes = []

    # -- ImuOnly ---------------------------------------------------------------

    def _start_state(self, frame):
        """Gravity-aligned rest state from the first accelerometer reading."""
        accel = frame.imu[-1].accel
        rotation = gravity_rotation(-accel) if np.linalg.norm(accel) > 0 else Rotation.identity()
        return KeyframeState(frame.timestamp, np.zeros(3), np.zeros(3), rotation)

    def _propagate(self, frame, span):
        if self.state is None:
            if frame.has_imu and frame.imu:
                self.state = self._start_state(frame)
            return
        if len(span) >= 2:
            try:
                preint = preintegrate(span, (self.state.bias_acc, self.state.bias_gyro), with_covariance=False)
            except (EmptyInterval, NonMonotonicTimestamps) as exc:
                logger.debug("no propagation for frame %d: %s", frame.index, exc)
                self.state = replace(self.state, timestamp=frame.timestamp)
                return
            self.state = predict_state(self.state, preint, self.gravity)
        else:
            self.state = replace(self.state.copy(), timestamp=frame.timestamp)

    def _imu_only(self, frame, span, decision, entry):
        self._propagate(frame, span)
        if not decision.is_keyframe:
            return
        if self.state is None:
            self.state = KeyframeState(frame.timestamp, np.zeros(3), np.zeros(3), Rotation.identity())
        features = frame.features
        if self.loop is not None and self.alignment is not None:
            self._reseed_from_loop(frame, entry)
        if len(features.stereo) < self.init.min_stereo_features:
            self._init_keyframes = []
            return
        preint = self._keyframe_preint((None, self.state.bias_gyro)) if self._init_keyframes else None
        self._init_keyframes.append((features, self.state.copy(), preint))
        self._init_keyframes = self._init_keyframes[-self.init.window_size:]
        if len(self._init_keyframes) < 2:
            return

        first_body = self._init_keyframes[0][1].pose
        try:
            result = visual_initialize([f for f, _, _ in self._init_keyframes], self.rig, self.init,
                                       first_camera_pose=first_body * self.rig.T_body_left)
        except InitializationError as exc:
            logger.info("frame %d: visual initialization failed: %s", frame.index, exc)
            self.mode = step_mode(self.mode, ModeEvent.VISUAL_INIT_FAILED)
            return

        window = result.body_window(self.rig)
        for (features_k, state_k, _), (_, _, preint_next) in zip(self._init_keyframes, self._init_keyframes[1:]):
            if preint_next is not None:
                window.preints[features_k.frame_id] = preint_next
        self._segment_start = len(self.trajectory) - (frame.index - self._init_keyframes[0][0].frame_id)
        self._segment_start = max(self._segment_start, 0)
        self.window = window
        self._init_keyframes = []
        self.mode = step_mode(self.mode, ModeEvent.VISUAL_INIT_OK)
        self.state = self._with_state(window.states[window.newest_id])
        logger.info("frame %d: visual initialization over %d keyframes, entering %s", frame.index,
                    len(window), self.mode.value)
        self._try_alignment(frame, entry)

    def _with_state(self, window_state):
        """Current state from a window state, keeping the propagated velocity/biases when VO has none."""
        s = window_state.copy()
        if self.mode is not TrackingMode.VISUAL_INERTIAL and self.state is not None:
            s.velocity, s.bias_acc, s.bias_gyro = self.state.velocity, self.state.bias_acc, self.state.bias_gyro
        return s

    def _reseed_from_loop(self, frame, entry):
        """After a loss, a verified loop re-seeds the dead-reckoned pose."""
        camera = self.state.pose * self.rig.T_body_left
        record = self.loop.add_keyframe(frame.index, frame.features, camera, frame.left_image)
        if record is None:
            return
        for match in self.loop.poll(wait=True):
            if match.current_id != frame.index:
                continue
            body = match.T_w_c * self.rig.T_body_left.inverse()
            self.state.position = body.translation
            self.state.rotation = body.rotation
            entry.loop_keyframe = match.loop_id
            logger.info("frame %d: pose re-seeded from loop keyframe %d", frame.index, match.loop_id)

    # -- VisualOnly ------------------------------------------------------------

    def _pnp_pose(self, features):
        """Body pose from PnP of left bearings against the window landmarks, or None."""
        points, bearings = [], []
        for obs in features.observations:
            lm = self.window.landmarks.get(obs.feature_id)
            if lm is None or obs.left_bearing is None:
                continue
            points.append(self.window.world_point(lm))
            bearings.append(obs.left_bearing)
        try:
            T_w_c, _ = pnp_ransac(np.array(points).reshape(-1, 3), np.array(bearings).reshape(-1, 3),
                                  focal_px=self.rig.left.focal, threshold_px=self.init.pnp_threshold_px,
                                  confidence=self.init.pnp_confidence, max_iterations=self.init.pnp_max_iterations,
                                  min_inlier_ratio=self.init.pnp_min_inlier_ratio, seed=self.init.seed)
        except GeometryError as exc:
            logger.debug("VO PnP failed: %s", exc)
            return None
        return T_w_c * self.window.T_body_left.inverse()

    def _visual_only(self, frame, decision, entry):
        pose = self._pnp_pose(frame.features)
        if pose is None:
            if len(frame.features.stereo) < self.init.min_stereo_features:
                logger.warning("frame %d: VO lost, back to %s", frame.index, TrackingMode.IMU_ONLY.value)
                self._enter_imu_only()
                self._propagate(frame, [])
                return
            pose = self.state.pose
        velocity = np.zeros(3)
        if self._previous_pose is not None and frame.timestamp > self._previous_pose[0]:
            velocity = (pose.translation - self._previous_pose[1].translation) / (frame.timestamp - self._previous_pose[0])
        self.state = KeyframeState(frame.timestamp, pose.translation, velocity, pose.rotation,
                                   self.state.bias_acc, self.state.bias_gyro)
        if not decision.is_keyframe:
            return

        bg = self.alignment.gyro_bias if self.alignment is not None else np.zeros(3)
        preint = self._keyframe_preint((None, bg))
        self.window.add_keyframe(frame.index, KeyframeState(frame.timestamp, pose.translation, velocity,
                                                            pose.rotation), frame.features, preint)
        manage_landmarks(self.window, self.backend)
        report = optimize_window(self.window, self.backend, self.kind)
        entry.solve_cost, entry.solve_ms = report.final_cost, report.elapsed_ms
        self.state = self._with_state(self.window.states[self.window.newest_id])
        if not self._try_alignment(frame, entry):
            marginalize_oldest(self.window, self.backend, self.kind)
            cap_landmarks(self.window, self.backend.landmark_cap)

    def _try_alignment(self, frame, entry):
        needed = 3 if self.alignment is not None else min(self.init.window_size, self.backend.window_size)
        if len(self.window) < needed:
            return False
        outcome = visual_inertial_alignment(self.window, self.init, self.alignment)
        if not outcome.converged:
            logger.info("frame %d: alignment failed (%s), staying in %s", frame.index, outcome.reason,
                        self.mode.value)
            self.mode = step_mode(self.mode, ModeEvent.ALIGNMENT_FAILED)
            return False
        self.mode = step_mode(self.mode, ModeEvent.ALIGNMENT_CONVERGED)
        self.alignment = outcome.result
        self.window = outcome.window
        self.trajectory = self.trajectory.transformed(outcome.frame_change, self._segment_start)
        if self._previous_pose is not None:
            self._previous_pose = (self._previous_pose[0], outcome.frame_change * self._previous_pose[1])
        self.state = self.window.states[self.window.newest_id].copy()
        marginalize_oldest(self.window, self.backend, self.kind)
        logger.info("frame %d: visual-inertial alignment converged, entering %s (gyro bias %s)", frame.index,
                    self.mode.value, np.array2string(outcome.result.gyro_bias, precision=4))
        return True

    # -- VisualInertial --------------------------------------------------------

    def _visual_inertial(self, frame, span, decision, entry):
        newest = self.window.states[self.window.newest_id]
        preint = self._keyframe_preint((newest.bias_acc, newest.bias_gyro))
        if preint is not None:
            predicted = predict_state(newest, preint, self.window.gravity)
        else:
            self._propagate(frame, span)
            predicted = self.state
        self.state = replace(predicted, timestamp=frame.timestamp)
        if not decision.is_keyframe:
            return

        self.window.add_keyframe(frame.index, self.state.copy(), frame.features, preint)
        manage_landmarks(self.window, self.backend)
        dual = dual_estimate(self.window, self.backend)
        self.window = dual.window
        entry.escalated = dual.escalated
        if dual.report is not None:
            entry.solve_cost, entry.solve_ms = dual.report.final_cost, dual.report.elapsed_ms

        if self.loop is not None:
            self.loop.add_keyframe(frame.index, frame.features, self.window.camera_pose(frame.index),
                                   frame.left_image)
            for match in self.loop.poll(wait=self.backend.deterministic):
                if match.current_id not in self.window.states:
                    continue
                self.window = relocation_optimize(self.window, match, self.backend, self.kind)
                entry.loop_keyframe = match.loop_id

        marginalize_oldest(self.window, self.backend, self.kind)
        cap_landmarks(self.window, self.backend.landmark_cap)
        self.state = self.window.states[self.window.newest_id].copy()

    def close(self):
        if self.loop is not None:
            self.loop.close()

    # -- outputs ---------------------------------------------------------------

    def log_frame(self):
        """Per-frame log as a DataFrame with the documented columns."""
        return pd.DataFrame([asdict(e) for e in self.log], columns=LOG_COLUMNS)


@dataclass
class RunManifest:
    """What a run consumed and produced; ``config`` alone reproduces it."""

    source: dict
    config: str
    output: str
    frames: int = 0
    keyframes: int = 0
    mode_counts: dict = field(default_factory=dict)
    ate_rmse: float = None
    elapsed_s: float = 0.0

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2)


def run_pipeline(source, cfg, out_dir):
    """
    Run the estimator over a source and write the run outputs.

    Writes ``trajectory.txt`` (TUM), ``frames.csv`` (per-frame log),
    ``manifest.json`` and ``config.conf`` (snapshot) into ``out_dir``.

    Returns:
        tuple: (TrajectoryEstimate, RunManifest)
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    estimator = Estimator(source.rig, cfg)
    try:
        for frame in source:
            estimator.process(frame)
    finally:
        estimator.close()

    trajectory = estimator.trajectory
    write_trajectory(trajectory, out / "trajectory.txt")
    table = estimator.log_frame()
    table.to_csv(out / "frames.csv", index=False)
    (out / "config.conf").write_text(cfg.to_text(), encoding="utf-8")

    manifest = RunManifest(source.describe(), cfg.to_text(), str(out), len(table),
                           int(table["is_keyframe"].sum()) if len(table) else 0,
                           {k: int(v) for k, v in table["mode"].value_counts().items()} if len(table) else {})
    groundtruth = source.groundtruth()
    if groundtruth is not None and len(trajectory) >= 2:
        try:
            manifest.ate_rmse = compute_ate(trajectory, groundtruth, align="SE3")
        except ValueError as exc:
            logger.warning("no ATE for this run: %s", exc)
    manifest.elapsed_s = round(time.perf_counter() - started, 3)
    manifest.save(out / "manifest.json")
    logger.info("run finished: %d frames, %d keyframes, modes %s", manifest.frames, manifest.keyframes,
                manifest.mode_counts)
    return trajectory, manifest
