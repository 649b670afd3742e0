"""
Stereo-Inertial Odometry - Sliding-Window Backend

Tightly coupled estimator over a window of keyframes: IMU preintegration
factors, a marginalization prior and unit-bearing reprojection terms of
inverse-depth landmarks. Stereo observations and single-camera (2D)
observations share one residual form and differ only in their weight.

Each new keyframe is solved twice on separate copies of the window, once
with stereo terms only and once with stereo plus left-image 2D terms. When
the two disagree, or too few stereo features are left, the window is
re-solved with right-image 2D terms as well.

Block ids used in every problem built here:

- ``("p", kf)``, ``("q", kf)``, ``("sb", kf)``: position, attitude and
  (velocity, accel bias, gyro bias) of keyframe ``kf``
- ``("l", landmark_id)``: inverse depth
- ``("tbc",)``, ``("qbc",)``: left camera to body extrinsic

License: MIT
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from odometry.errors import GeometryError
from odometry.frontend import FeatureKind
from odometry.geometry import Rotation, Transform, quat_to_matrix_batch, skew_batch, triangulate
from odometry.imu import GravityVector, ImuFactor, reintegrate
from odometry.optimizer import (
    FactorBatch,
    HuberLoss,
    Manifold,
    ParameterBlock,
    marginalize,
    solve,
    yaw_frozen_basis,
)

logger = logging.getLogger(__name__)

# stereo rays of a point at 100 m over an 11 cm baseline are ~0.06 deg apart
STEREO_MIN_PARALLAX_DEG = 0.05

CAMERAS = ("left", "right")


class VisualFactorKind(Enum):
    STEREO_ONLY = "StereoOnly"
    STEREO_PLUS_LEFT_2D = "StereoPlusLeft2D"
    STEREO_PLUS_BOTH_2D = "StereoPlusBoth2D"


@dataclass(frozen=True)
class BackendSettings:
    window_size: int = 10
    beta1: float = 1.0
    beta2: float = 0.5
    pixel_sigma: float = 1.5
    outlier_threshold_px: float = 3.0
    round2_budget_ms: float = 30.0
    round2_max_iterations: int = 4
    landmark_cap: int = 200
    dual_max_translation: float = 0.05
    dual_max_rotation_deg: float = 0.5
    min_stereo_count: int = 20
    estimate_extrinsic: bool = False
    max_iterations: int = 10
    tolerance: float = 1e-6
    initial_damping: float = 1e-8
    min_parallax_deg: float = 1.0
    max_bias_delta: float = 0.1
    max_accel_bias: float = 1.0
    max_gyro_bias: float = 0.2
    deterministic: bool = False

    @classmethod
    def from_config(cls, cfg):
        return cls(
            window_size=cfg["backend.window_size"],
            beta1=cfg["backend.beta1"],
            beta2=cfg["backend.beta2"],
            pixel_sigma=cfg["backend.pixel_sigma"],
            outlier_threshold_px=cfg["backend.outlier_threshold_px"],
            round2_budget_ms=cfg["backend.round2_budget_ms"],
            round2_max_iterations=cfg["backend.round2_max_iterations"],
            landmark_cap=cfg["backend.landmark_cap"],
            dual_max_translation=cfg["backend.dual_max_translation"],
            dual_max_rotation_deg=cfg["backend.dual_max_rotation_deg"],
            min_stereo_count=cfg["backend.min_stereo_count"],
            estimate_extrinsic=cfg["backend.estimate_extrinsic"],
            max_iterations=cfg["optimizer.max_iterations"],
            tolerance=cfg["optimizer.tolerance"],
            initial_damping=cfg["optimizer.initial_damping"],
            min_parallax_deg=cfg["geometry.min_parallax_deg"],
            max_bias_delta=cfg["imu.max_bias_delta"],
            max_accel_bias=cfg["imu.max_accel_bias"],
            max_gyro_bias=cfg["imu.max_gyro_bias"],
            deterministic=cfg["run.deterministic"],
        )


# ---------------------------------------------------------------------------
# window state
# ---------------------------------------------------------------------------

@dataclass
class Landmark:
    """
    Inverse-depth landmark. The point sits at ``anchor_bearing / inverse_depth``
    in the ``anchor_camera`` of keyframe ``anchor_id``.
    """

    landmark_id: int
    anchor_id: int
    anchor_camera: str
    anchor_bearing: np.ndarray
    inverse_depth: float
    observations: dict = field(default_factory=dict)
    error_px: float = 0.0
    from_stereo: bool = False

    @property
    def track_length(self):
        return len(self.observations)

    @property
    def score(self):
        return self.track_length / (1.0 + self.error_px)

    def copy(self):
        return Landmark(self.landmark_id, self.anchor_id, self.anchor_camera, self.anchor_bearing.copy(),
                        self.inverse_depth, dict(self.observations), self.error_px, self.from_stereo)


@dataclass
class WindowState:
    """
    Keyframes currently optimized together.

    ``preints[kf]`` is the preintegration from ``kf`` to the keyframe that
    follows it. ``pending`` holds 2D tracks that have no depth yet:
    feature id -> [(keyframe id, observation), ...].
    """

    rig: object
    gravity: GravityVector = field(default_factory=GravityVector)
    use_imu: bool = True
    keyframe_ids: list = field(default_factory=list)
    states: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    preints: dict = field(default_factory=dict)
    landmarks: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)
    prior: object = None
    T_body_left: Transform = None

    def __post_init__(self):
        if self.T_body_left is None:
            self.T_body_left = self.rig.T_body_left

    def __len__(self):
        return len(self.keyframe_ids)

    @property
    def newest_id(self):
        return self.keyframe_ids[-1]

    def newest_pose(self):
        return self.states[self.newest_id].pose

    def add_keyframe(self, kf_id, state, features, preint=None):
        """Append a keyframe; ``preint`` runs from the previous newest keyframe to it."""
        if self.keyframe_ids and preint is not None:
            self.preints[self.keyframe_ids[-1]] = preint
        self.keyframe_ids.append(kf_id)
        self.states[kf_id] = state
        self.features[kf_id] = features

    def camera_pose(self, kf_id, camera="left"):
        """T_w_c of one camera of a keyframe."""
        T = self.states[kf_id].pose * self.T_body_left
        return T * self.rig.T_left_right if camera == "right" else T

    def world_point(self, landmark):
        T = self.camera_pose(landmark.anchor_id, landmark.anchor_camera)
        return T.apply(landmark.anchor_bearing / landmark.inverse_depth)

    def copy(self):
        return WindowState(
            self.rig, self.gravity, self.use_imu, list(self.keyframe_ids),
            {k: s.copy() for k, s in self.states.items()},
            dict(self.features), dict(self.preints),
            {k: lm.copy() for k, lm in self.landmarks.items()},
            {k: list(v) for k, v in self.pending.items()},
            self.prior, self.T_body_left,
        )

    def restore(self, snapshot):
        """Take over every field of ``snapshot``."""
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(snapshot, name))


def anchor_landmark(window, landmark_id, point_w, history, from_stereo):
    """
    Build a landmark anchored at the first observation in ``history``.

    Returns:
        Landmark or None when the point is behind the anchor camera
    """
    kf_id, obs = history[0]
    camera = "left" if obs.left_bearing is not None else "right"
    bearing = obs.left_bearing if camera == "left" else obs.right_bearing
    point_c = window.camera_pose(kf_id, camera).inverse().apply(point_w)
    depth = float(bearing @ point_c)
    if depth <= 0:
        return None
    return Landmark(landmark_id, kf_id, camera, np.asarray(bearing, dtype=float).copy(), 1.0 / depth,
                    {k: o for k, o in history}, 0.0, from_stereo)


# ---------------------------------------------------------------------------
# visual residual
# ---------------------------------------------------------------------------

@dataclass
class VisualFactor:
    """Observations of one landmark in one target keyframe."""

    landmark_id: int
    anchor_id: int
    anchor_camera: str
    anchor_bearing: np.ndarray
    target_id: int
    target: object
    kind: VisualFactorKind
    beta1: float = 1.0
    beta2: float = 0.5

    def terms(self):
        """Active (camera, observed bearing, weight) terms."""
        obs = self.target
        if obs.kind is FeatureKind.STEREO_3D:
            terms = [("left", obs.left_bearing, self.beta1), ("right", obs.right_bearing, self.beta1)]
        elif obs.kind is FeatureKind.LEFT_2D and self.kind is not VisualFactorKind.STEREO_ONLY:
            terms = [("left", obs.left_bearing, self.beta2)]
        elif obs.kind is FeatureKind.RIGHT_2D and self.kind is VisualFactorKind.STEREO_PLUS_BOTH_2D:
            terms = [("right", obs.right_bearing, self.beta2)]
        else:
            terms = []
        return [(camera, bearing, beta) for camera, bearing, beta in terms
                if beta > 0 and not (self.target_id == self.anchor_id and camera == self.anchor_camera)]


class ReprojectionBatch(FactorBatch):
    """
    Unit-bearing residuals w (b_obs - P / |P|) of inverse-depth landmarks.

    Slots: p_anchor, q_anchor, p_target, q_target, inverse depth, t_bc, q_bc.
    Rows whose predicted point has non-positive depth in the target camera
    contribute zero.
    """

    def __init__(self, slot_ids, anchor_bearing, anchor_camera, target_camera, observed, weight,
                 T_left_right, loss=None):
        super().__init__(slot_ids, loss)
        offsets_R = np.stack([np.eye(3), T_left_right.rotation.matrix()])
        offsets_t = np.stack([np.zeros(3), T_left_right.translation])
        self.anchor_bearing = np.asarray(anchor_bearing, dtype=float).reshape(-1, 3)
        self.R_ca = offsets_R[anchor_camera]
        self.t_ca = offsets_t[anchor_camera]
        self.R_ct = offsets_R[target_camera]
        self.t_ct = offsets_t[target_camera]
        self.observed = np.asarray(observed, dtype=float).reshape(-1, 3)
        self.weight = np.asarray(weight, dtype=float)

    @classmethod
    def from_factors(cls, factors, rig, pixel_sigma=None, loss=None, pose_keys=("p", "q"),
                     extrinsic_ids=(("tbc",), ("qbc",))):
        """
        Flatten visual factors into one batch.

        Each term is weighted by its beta; with ``pixel_sigma`` the weight is
        further scaled by focal / pixel_sigma so residuals are whitened pixels.
        ``pose_keys`` and ``extrinsic_ids`` name the blocks the rows read.
        """
        kp, kq = pose_keys
        focal = {"left": 1.0, "right": 1.0}
        if pixel_sigma is not None:
            focal = {"left": rig.left.focal / pixel_sigma, "right": rig.right.focal / pixel_sigma}
        slots = [[] for _ in range(7)]
        anchor_b, anchor_cam, target_cam, observed, weight = [], [], [], [], []
        for f in factors:
            for camera, bearing, beta in f.terms():
                ids = ((kp, f.anchor_id), (kq, f.anchor_id), (kp, f.target_id), (kq, f.target_id),
                       ("l", f.landmark_id)) + tuple(extrinsic_ids)
                for slot, bid in zip(slots, ids):
                    slot.append(bid)
                anchor_b.append(f.anchor_bearing)
                anchor_cam.append(CAMERAS.index(f.anchor_camera))
                target_cam.append(CAMERAS.index(camera))
                observed.append(bearing)
                weight.append(beta * focal[camera])
        return cls(slots, np.reshape(anchor_b, (-1, 3)), np.array(anchor_cam, dtype=int),
                   np.array(target_cam, dtype=int), np.reshape(observed, (-1, 3)), np.array(weight),
                   rig.T_left_right, loss)

    def evaluate(self, values, jacobians=True):
        p_i, q_i, p_j, q_j, lam, t_bc, q_bc = values
        R_i = quat_to_matrix_batch(q_i)
        R_j = quat_to_matrix_batch(q_j)
        R_bc = quat_to_matrix_batch(q_bc)
        lam = lam[:, 0]

        Q_a = self.anchor_bearing / lam[:, None]
        Qt_a = np.einsum("nij,nj->ni", self.R_ca, Q_a) + self.t_ca
        P_bi = np.einsum("nij,nj->ni", R_bc, Qt_a) + t_bc
        P_w = np.einsum("nij,nj->ni", R_i, P_bi) + p_i
        P_bj = np.einsum("nji,nj->ni", R_j, P_w - p_j)
        P_lt = np.einsum("nji,nj->ni", R_bc, P_bj - t_bc)
        P_t = np.einsum("nji,nj->ni", self.R_ct, P_lt - self.t_ct)

        norm = np.linalg.norm(P_t, axis=1)
        active = (P_t[:, 2] > 0) & (norm > 1e-12)
        safe = np.where(active, norm, 1.0)
        unit = P_t / safe[:, None]
        residual = self.weight[:, None] * (self.observed - unit)
        residual[~active] = 0.0
        if not jacobians:
            return residual, None

        D = -(self.weight / safe)[:, None, None] * (np.eye(3)[None] - unit[:, :, None] * unit[:, None, :])
        D[~active] = 0.0
        RctT = np.swapaxes(self.R_ct, 1, 2)
        A = RctT @ np.swapaxes(R_bc, 1, 2)
        DA = D @ A
        DM = DA @ np.swapaxes(R_j, 1, 2)
        DMRi = DM @ R_i
        d_lam = -self.anchor_bearing / (lam * lam)[:, None]

        J_pi = DM
        J_qi = -DMRi @ skew_batch(P_bi)
        J_pj = -DM
        J_qj = DA @ skew_batch(P_bj)
        J_l = DMRi @ R_bc @ self.R_ca @ d_lam[:, :, None]
        J_tbc = DMRi - DA
        J_qbc = -DMRi @ R_bc @ skew_batch(Qt_a) + D @ RctT @ skew_batch(P_lt)
        return residual, [J_pi, J_qi, J_pj, J_qj, J_l, J_tbc, J_qbc]


def build_visual_factors(window, kind, settings=BackendSettings(), landmark_ids=None):
    """VisualFactors of every landmark (or of ``landmark_ids``) in the window."""
    factors = []
    ids = window.landmarks if landmark_ids is None else landmark_ids
    for lid in ids:
        lm = window.landmarks[lid]
        if kind is VisualFactorKind.STEREO_ONLY and not lm.from_stereo:
            continue
        for kf_id, obs in lm.observations.items():
            if kf_id not in window.states:
                continue
            factors.append(VisualFactor(lid, lm.anchor_id, lm.anchor_camera, lm.anchor_bearing,
                                        kf_id, obs, kind, settings.beta1, settings.beta2))
    return factors


def block_values(window):
    """Current value of every block a window problem can reference."""
    values = {("tbc",): window.T_body_left.translation, ("qbc",): window.T_body_left.rotation.q}
    for kf_id in window.keyframe_ids:
        s = window.states[kf_id]
        values[("p", kf_id)] = s.position
        values[("q", kf_id)] = s.rotation.q
        values[("sb", kf_id)] = s.speed_bias
    for lid, lm in window.landmarks.items():
        values[("l", lid)] = np.array([lm.inverse_depth])
    return values


def visual_residual(factor, window, jacobians=True):
    """
    Beta-weighted bearing residuals of one VisualFactor at the window's
    current values.

    Returns:
        tuple: (residual rows (k, 3), [J_k (k, 3, tangent_k)] for the slots
            p_anchor, q_anchor, p_target, q_target, inverse depth, t_bc, q_bc);
            rows whose point falls behind the target camera are zero
    """
    batch = ReprojectionBatch.from_factors([factor], window.rig)
    if not len(batch):
        return np.zeros((0, 3)), ([] if jacobians else None)
    values = block_values(window)
    stacked = [np.stack([values[b] for b in ids]) for ids in batch.slot_ids]
    return batch.evaluate(stacked, jacobians)


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

def build_blocks(window, settings=BackendSettings(), gauge=True):
    """
    Parameter blocks of a window problem.

    With ``gauge`` the first keyframe's position is fixed and so is its yaw
    (its whole attitude when the IMU is not used).
    """
    values = block_values(window)
    first = window.keyframe_ids[0]
    blocks = {}
    for kf_id in window.keyframe_ids:
        fixed = gauge and kf_id == first
        subspace = None
        fixed_q = False
        if fixed and window.use_imu:
            subspace = yaw_frozen_basis(values[("q", kf_id)])
        elif fixed:
            fixed_q = True
        blocks[("p", kf_id)] = ParameterBlock(("p", kf_id), values[("p", kf_id)], constant=fixed)
        blocks[("q", kf_id)] = ParameterBlock(("q", kf_id), values[("q", kf_id)], Manifold.ROTATION,
                                              constant=fixed_q, subspace=subspace)
        blocks[("sb", kf_id)] = ParameterBlock(("sb", kf_id), values[("sb", kf_id)], constant=not window.use_imu)
    for lid in window.landmarks:
        blocks[("l", lid)] = ParameterBlock(("l", lid), values[("l", lid)], Manifold.INVERSE_DEPTH)
    blocks[("tbc",)] = ParameterBlock(("tbc",), values[("tbc",)], constant=not settings.estimate_extrinsic)
    blocks[("qbc",)] = ParameterBlock(("qbc",), values[("qbc",)], Manifold.ROTATION,
                                      constant=not settings.estimate_extrinsic)
    return blocks


def imu_factors(window, keyframe_pairs=None):
    if not window.use_imu:
        return []
    ids = window.keyframe_ids
    pairs = list(zip(ids[:-1], ids[1:])) if keyframe_pairs is None else keyframe_pairs
    factors = []
    for a, b in pairs:
        preint = window.preints.get(a)
        if preint is None:
            continue
        factors.append(ImuFactor(preint, [("p", a), ("q", a), ("sb", a), ("p", b), ("q", b), ("sb", b)],
                                 window.gravity))
    return factors


def build_factors(window, kind, settings=BackendSettings(), landmark_ids=None):
    """Visual batch (Huber, whitened pixels), IMU factors and the prior."""
    factors = []
    visual = build_visual_factors(window, kind, settings, landmark_ids)
    batch = ReprojectionBatch.from_factors(visual, window.rig, settings.pixel_sigma, HuberLoss(1.0))
    if len(batch):
        factors.append(batch)
    factors.extend(imu_factors(window))
    if window.prior is not None:
        factors.append(window.prior)
    return factors


def commit_blocks(window, blocks, settings=BackendSettings()):
    """Write solved block values back into the window."""
    for kf_id in window.keyframe_ids:
        s = window.states[kf_id]
        s.position = blocks[("p", kf_id)].value.copy()
        s.rotation = Rotation(blocks[("q", kf_id)].value)
        sb = blocks[("sb", kf_id)].value
        s.velocity, s.bias_acc, s.bias_gyro = sb[0:3].copy(), sb[3:6].copy(), sb[6:9].copy()
    for lid, lm in window.landmarks.items():
        lm.inverse_depth = float(blocks[("l", lid)].value[0])
    if settings.estimate_extrinsic:
        window.T_body_left = Transform(Rotation(blocks[("qbc",)].value), blocks[("tbc",)].value.copy())


def landmark_pixel_errors(window):
    """Mean reprojection error in pixels of every landmark over all its observations."""
    cams = {"left": window.rig.left, "right": window.rig.right}
    T_c_w = {}
    rows = {"left": ([], [], []), "right": ([], [], [])}
    for lid, lm in window.landmarks.items():
        point = window.world_point(lm)
        for kf_id, obs in lm.observations.items():
            if kf_id not in window.states:
                continue
            for camera, pixel in (("left", obs.left), ("right", obs.right)):
                if pixel is None:
                    continue
                key = (kf_id, camera)
                if key not in T_c_w:
                    T_c_w[key] = window.camera_pose(kf_id, camera).inverse()
                lids, points, pixels = rows[camera]
                lids.append(lid)
                points.append(T_c_w[key].apply(point))
                pixels.append(pixel)
    total, count = {}, {}
    for camera, (lids, points, pixels) in rows.items():
        if not lids:
            continue
        projected, valid = cams[camera].project_points(np.array(points))
        err = np.linalg.norm(projected - np.array(pixels), axis=1)
        err[~valid] = np.inf
        for lid, e in zip(lids, err):
            total[lid] = total.get(lid, 0.0) + e
            count[lid] = count.get(lid, 0) + 1
    return {lid: total[lid] / count[lid] for lid in total}


def reanchor_yaw(window, reference_yaw):
    """
    Rotate the whole window about the first keyframe so that keyframe keeps
    ``reference_yaw``.
    """
    first = window.states[window.keyframe_ids[0]]
    delta = reference_yaw - first.rotation.yaw()
    if abs(delta) < 1e-12:
        return
    Rz = Rotation.from_euler_zyx(delta, 0.0, 0.0)
    origin = first.position.copy()
    for kf_id in window.keyframe_ids:
        s = window.states[kf_id]
        s.position = origin + Rz.apply(s.position - origin)
        s.velocity = Rz.apply(s.velocity)
        s.rotation = Rz * s.rotation


# ---------------------------------------------------------------------------
# window optimization
# ---------------------------------------------------------------------------

@dataclass
class WindowReport:
    kind: VisualFactorKind
    round1: object = None
    round2: object = None
    removed_landmarks: list = field(default_factory=list)
    budget_exceeded: bool = False
    reintegrated: int = 0
    reverted: bool = False

    @property
    def final_cost(self):
        last = self.round2 or self.round1
        return last.final_cost if last is not None else 0.0

    @property
    def elapsed_ms(self):
        return sum(r.elapsed_ms for r in (self.round1, self.round2) if r is not None)


def solve_window(window, kind, settings, **limits):
    factors = build_factors(window, kind, settings)
    if not factors:
        return None
    blocks = build_blocks(window, settings)
    report = solve(blocks, factors, tolerance=settings.tolerance,
                   initial_damping=settings.initial_damping, **limits)
    commit_blocks(window, blocks, settings)
    return report


def optimize_window(window, settings=BackendSettings(), kind=VisualFactorKind.STEREO_PLUS_LEFT_2D,
                    budget_ms=None):
    """
    Two-round bundle adjustment of the window, in place.

    Round 1 solves the full problem; landmarks whose mean reprojection error
    then exceeds ``outlier_threshold_px`` are removed; round 2 re-solves
    within ``budget_ms`` (``round2_max_iterations`` iterations in
    deterministic mode). Keyframes are re-anchored on the first keyframe's
    yaw and preintegrations re-integrated where the bias moved past the
    first-order bound. Biases that leave their bounds revert the window.

    Args:
        window (WindowState): window to optimize
        settings (BackendSettings): weights, thresholds and limits
        kind (VisualFactorKind): which observation kinds contribute
        budget_ms (float): round 2 time budget, ``settings.round2_budget_ms`` if None

    Returns:
        WindowReport
    """
    budget_ms = settings.round2_budget_ms if budget_ms is None else budget_ms
    report = WindowReport(kind)
    snapshot = window.copy()
    reference_yaw = window.states[window.keyframe_ids[0]].rotation.yaw()

    report.round1 = solve_window(window, kind, settings, max_iterations=settings.max_iterations)
    if report.round1 is None:
        return report

    errors = landmark_pixel_errors(window)
    for lid, err in errors.items():
        window.landmarks[lid].error_px = float(err)
        if err > settings.outlier_threshold_px:
            report.removed_landmarks.append(lid)
    for lid in report.removed_landmarks:
        del window.landmarks[lid]

    if budget_ms <= 0:
        report.budget_exceeded = True
        logger.warning("no time left for the second window solve, keeping round 1")
    elif settings.deterministic:
        report.round2 = solve_window(window, kind, settings, max_iterations=settings.round2_max_iterations)
    else:
        report.round2 = solve_window(window, kind, settings, max_iterations=settings.max_iterations,
                                      time_budget_ms=budget_ms)
        report.budget_exceeded = bool(report.round2 and report.round2.budget_exceeded)

    reanchor_yaw(window, reference_yaw)

    if window.use_imu and not all(s.biases_within(settings.max_accel_bias, settings.max_gyro_bias)
                                  for s in window.states.values()):
        logger.warning("window biases left their bounds, reverting the solve")
        window.restore(snapshot)
        report.reverted = True
        return report

    if window.use_imu:
        for kf_id in window.keyframe_ids[:-1]:
            preint = window.preints.get(kf_id)
            s = window.states[kf_id]
            if preint is None:
                continue
            drift = max(np.linalg.norm(s.bias_acc - preint.bias_acc), np.linalg.norm(s.bias_gyro - preint.bias_gyro))
            if drift > settings.max_bias_delta:
                window.preints[kf_id] = reintegrate(preint, s.bias_acc, s.bias_gyro)
                report.reintegrated += 1

    for lid, err in landmark_pixel_errors(window).items():
        window.landmarks[lid].error_px = float(err)
    logger.debug("window %s: cost %.4g -> %.4g, %d outliers removed", kind.value,
                 report.round1.initial_cost, report.final_cost, len(report.removed_landmarks))
    return report


# ---------------------------------------------------------------------------
# dual-track estimation
# ---------------------------------------------------------------------------

@dataclass
class DualEstimate:
    """
    Newest-keyframe poses from the stereo-only track (A) and the
    stereo + left 2D track (B). ``window`` holds the committed result.
    """

    pose_a: Transform
    pose_b: Transform
    consistent: bool
    escalated: bool
    stereo_count: int
    window: WindowState = None
    report: WindowReport = None


def needs_escalation(pose_a, pose_b, stereo_count, settings=BackendSettings()):
    """
    Returns:
        tuple: (consistent, escalate)
    """
    dt, dr = pose_a.distance_to(pose_b)
    consistent = dt < settings.dual_max_translation and dr < settings.dual_max_rotation_deg
    return consistent, (not consistent) or stereo_count < settings.min_stereo_count


def dual_estimate(window, settings=BackendSettings(), budget_ms=None):
    """
    Solve the window with tracks A and B on independent copies, compare the
    newest poses and escalate to right-image 2D terms when needed.

    The input window is left untouched; the caller commits
    ``DualEstimate.window``.

    Returns:
        DualEstimate
    """
    track_a, track_b = window.copy(), window.copy()
    if settings.deterministic:
        optimize_window(track_a, settings, VisualFactorKind.STEREO_ONLY, budget_ms)
        report_b = optimize_window(track_b, settings, VisualFactorKind.STEREO_PLUS_LEFT_2D, budget_ms)
    else:
        with ThreadPoolExecutor(max_workers=2) as pool:
            future_a = pool.submit(optimize_window, track_a, settings, VisualFactorKind.STEREO_ONLY, budget_ms)
            future_b = pool.submit(optimize_window, track_b, settings, VisualFactorKind.STEREO_PLUS_LEFT_2D,
                                   budget_ms)
            future_a.result()
            report_b = future_b.result()

    pose_a, pose_b = track_a.newest_pose(), track_b.newest_pose()
    stereo_count = len(window.features[window.newest_id].stereo)
    consistent, escalate = needs_escalation(pose_a, pose_b, stereo_count, settings)
    result, report = track_b, report_b
    if escalate:
        logger.debug("escalating keyframe %s to right-image 2D terms (consistent=%s, stereo=%d)",
                     window.newest_id, consistent, stereo_count)
        result = window.copy()
        report = optimize_window(result, settings, VisualFactorKind.STEREO_PLUS_BOTH_2D, budget_ms)
    return DualEstimate(pose_a, pose_b, consistent, escalate, stereo_count, result, report)


# ---------------------------------------------------------------------------
# landmark management
# ---------------------------------------------------------------------------

def _bearing(obs):
    if obs.left_bearing is not None:
        return "left", obs.left_bearing
    return "right", obs.right_bearing


def manage_landmarks(window, settings=BackendSettings()):
    """
    Attach the newest keyframe's observations to the landmark set.

    Known landmarks gain an observation. Stereo features are triangulated
    from the baseline at once; 2D features wait in ``window.pending`` until
    the rays of their first and newest observations are ``min_parallax_deg``
    apart.

    Returns:
        list: ids of the landmarks created
    """
    kf_id = window.newest_id
    created = []
    T_wl = window.camera_pose(kf_id, "left")
    for obs in window.features[kf_id].observations:
        fid = obs.feature_id
        landmark = window.landmarks.get(fid)
        if landmark is not None:
            landmark.observations[kf_id] = obs
            landmark.from_stereo |= obs.is_stereo
            continue
        history = window.pending.pop(fid, []) + [(kf_id, obs)]
        point = None
        if obs.is_stereo:
            try:
                point_l, _ = triangulate(Transform.identity(), window.rig.T_left_right, obs.left_bearing,
                                         obs.right_bearing, STEREO_MIN_PARALLAX_DEG)
                point = T_wl.apply(point_l)
            except GeometryError:
                point = None
        elif len(history) >= 2:
            (first_kf, first_obs) = history[0]
            cam_a, b_a = _bearing(first_obs)
            cam_b, b_b = _bearing(obs)
            try:
                point, _ = triangulate(window.camera_pose(first_kf, cam_a), window.camera_pose(kf_id, cam_b),
                                       b_a, b_b, settings.min_parallax_deg)
            except GeometryError:
                point = None
        landmark = None if point is None else anchor_landmark(window, fid, point, history, obs.is_stereo)
        if landmark is None:
            window.pending[fid] = history
            continue
        landmark.from_stereo = any(o.is_stereo for _, o in history)
        window.landmarks[fid] = landmark
        created.append(fid)
    logger.debug("keyframe %s: %d new landmarks, %d pending tracks", kf_id, len(created), len(window.pending))
    return created


def cap_landmarks(window, cap=200):
    """Keep the ``cap`` best landmarks by track length / (1 + mean error)."""
    if len(window.landmarks) <= cap:
        return []
    ranked = sorted(window.landmarks.values(), key=lambda lm: (-lm.score, lm.landmark_id))
    dropped = [lm.landmark_id for lm in ranked[cap:]]
    for lid in dropped:
        del window.landmarks[lid]
    return dropped


# ---------------------------------------------------------------------------
# marginalization
# ---------------------------------------------------------------------------

def marginalize_oldest(window, settings=BackendSettings(), kind=VisualFactorKind.STEREO_PLUS_LEFT_2D):
    """
    Remove the oldest keyframe once the window is full.

    The oldest keyframe's state and the landmarks anchored on it are
    eliminated into a Gaussian prior on the blocks they connect to. Those
    landmarks, when still observed, come back re-anchored on their next
    observing keyframe.

    Returns:
        PriorFactor or None; the window is updated in place
    """
    if len(window) < settings.window_size:
        return window.prior
    oldest = window.keyframe_ids[0]
    anchored = [lid for lid, lm in window.landmarks.items() if lm.anchor_id == oldest]

    blocks = build_blocks(window, settings, gauge=False)
    factors = []
    visual = build_visual_factors(window, kind, settings, anchored)
    batch = ReprojectionBatch.from_factors(visual, window.rig, settings.pixel_sigma, HuberLoss(1.0))
    if len(batch):
        factors.append(batch)
    if len(window) > 1:
        factors.extend(imu_factors(window, [(oldest, window.keyframe_ids[1])]))
    if window.prior is not None:
        factors.append(window.prior)
    dropped = [("p", oldest), ("q", oldest), ("sb", oldest)] + [("l", lid) for lid in anchored]
    prior = marginalize(blocks, factors, dropped) if factors else None

    points = {lid: window.world_point(window.landmarks[lid]) for lid in anchored}
    window.keyframe_ids.pop(0)
    for store in (window.states, window.features, window.preints):
        store.pop(oldest, None)
    order = {kf: i for i, kf in enumerate(window.keyframe_ids)}
    for lid in list(window.landmarks):
        lm = window.landmarks[lid]
        lm.observations.pop(oldest, None)
        keep = len(lm.observations) >= 2 or any(o.is_stereo for o in lm.observations.values())
        if keep and lid in points:
            history = sorted(lm.observations.items(), key=lambda item: order[item[0]])
            moved = anchor_landmark(window, lid, points[lid], history, lm.from_stereo)
            if moved is not None:
                moved.error_px = lm.error_px
                window.landmarks[lid] = moved
            keep = moved is not None
        if not keep:
            del window.landmarks[lid]
    for fid in list(window.pending):
        history = [(kf, obs) for kf, obs in window.pending[fid] if kf != oldest]
        if history:
            window.pending[fid] = history
        else:
            del window.pending[fid]

    window.prior = prior
    logger.debug("marginalized keyframe %s with %d anchored landmarks", oldest, len(anchored))
    return prior
