"""
Stereo-Inertial Odometry - Synthetic Scenarios

Ground-truth generator for tests and experiments: a room of textured
walls, a smooth body trajectory, exact IMU readings derived analytically
from it and per-frame stereo feature observations. ``perturb`` adds sensor
noise, planted biases and pixel outliers while keeping every planted value
available for oracle checks.

Trajectories:
- Stationary
- StraightConstantVelocity: constant velocity, then a late banked 90 deg turn
- Circle: constant speed on a circle
- Figure8: lemniscate-like path with a slow height change
- LoopRevisit: ellipse driven several times, revisiting the start

Texture profiles:
- Rich: every point is visible in both images
- LeftOnly: most points are untextured in the right image
- BlackoutWindow: no features at all between blackout_start and blackout_end

License: MIT
"""

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from config import Config
from odometry.dataset import export_euroc, ns_to_seconds
from odometry.errors import ScenarioError
from odometry.frontend import FeatureKind, FeatureObservation, StereoFrameFeatures
from odometry.geometry import Rotation, StereoRig, build_rig
from odometry.imu import STANDARD_GRAVITY, ImuSample, KeyframeState
from odometry.trajectory import TrajectoryEstimate

logger = logging.getLogger(__name__)

TRAJECTORY_KINDS = ("Stationary", "StraightConstantVelocity", "Circle", "Figure8", "LoopRevisit")
TEXTURE_PROFILES = ("Rich", "LeftOnly", "BlackoutWindow")
NOISE_LEVELS = ("none", "realistic")

START_NS = 1_000_000_000
FEATURE_BUDGET = 150
MIN_DEPTH = 0.5
MAX_DEPTH = 40.0
BORDER_PX = 10.0
RIGHT_TEXTURE_FRACTION = 0.2
GRAVITY_W = np.array([0.0, 0.0, -STANDARD_GRAVITY])

# Calibration of the simulated rig; config/synthetic.conf carries the same values.
SYNTHETIC_CALIBRATION = {
    "calib.cam0.intrinsics": (460.0, 460.0, 376.0, 240.0),
    "calib.cam0.distortion": (0.0, 0.0, 0.0, 0.0),
    "calib.cam0.resolution": (752, 480),
    "calib.cam0.T_BS": (0.0, 0.0, 1.0, 0.0,
                        -1.0, 0.0, 0.0, 0.055,
                        0.0, -1.0, 0.0, 0.0,
                        0.0, 0.0, 0.0, 1.0),
    "calib.cam1.intrinsics": (460.0, 460.0, 376.0, 240.0),
    "calib.cam1.distortion": (0.0, 0.0, 0.0, 0.0),
    "calib.cam1.resolution": (752, 480),
    "calib.cam1.T_BS": (0.0, 0.0, 1.0, 0.0,
                        -1.0, 0.0, 0.0, -0.055,
                        0.0, -1.0, 0.0, 0.0,
                        0.0, 0.0, 0.0, 1.0),
}


def synthetic_config(cfg=None):
    """``cfg`` (defaults if None) with the simulated rig's calibration."""
    return (cfg or Config()).with_overrides(SYNTHETIC_CALIBRATION)


def synthetic_rig():
    """The rig described by SYNTHETIC_CALIBRATION."""
    return build_rig(synthetic_config())


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    kind: str = "Figure8"
    duration: float = 60.0
    seed: int = 0
    imu_rate: float = 200.0
    frame_rate: float = 20.0
    points: int = 4000
    texture: str = "Rich"
    blackout_start: float = 0.0
    blackout_end: float = 0.0
    radius: float = 5.0
    speed: float = 1.5
    noise: str = "none"

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ScenarioError(f"unknown trajectory kind {self.kind!r} (expected one of {', '.join(TRAJECTORY_KINDS)})")
        if self.texture not in TEXTURE_PROFILES:
            raise ScenarioError(f"unknown texture profile {self.texture!r}")
        if self.noise not in NOISE_LEVELS:
            raise ScenarioError(f"unknown noise level {self.noise!r}")
        if self.duration <= 0 or self.imu_rate <= 0 or self.frame_rate <= 0:
            raise ScenarioError("duration and rates must be positive")
        ratio = self.imu_rate / self.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("imu_rate must be a whole multiple of frame_rate")
        if self.points <= 0 or self.radius <= 0 or self.speed < 0:
            raise ScenarioError("points and radius must be positive, speed non-negative")
        if self.texture == "BlackoutWindow" and not 0 <= self.blackout_start < self.blackout_end:
            raise ScenarioError("BlackoutWindow needs 0 <= blackout_start < blackout_end")

    def to_spec(self):
        return ",".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    def in_blackout(self, t):
        return self.texture == "BlackoutWindow" and self.blackout_start < t < self.blackout_end


def parse_scenario(spec):
    """
    Parse ``kind=Figure8,duration=60,seed=7,...``.

    Raises:
        ScenarioError: unknown key, unparseable value or invalid scenario
    """
    types = {f.name: type(f.default) for f in fields(Scenario)}
    values = {}
    for item in (part.strip() for part in spec.split(",")):
        if not item:
            continue
        if "=" not in item:
            raise ScenarioError(f"expected key=value in scenario, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in types:
            raise ScenarioError(f"unknown scenario key {key!r}")
        try:
            values[key] = types[key](value) if types[key] is not int else int(float(value))
        except ValueError:
            raise ScenarioError(f"invalid value for {key}: {value!r}") from None
    return Scenario(**values)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _smoothstep(u):
    """Quintic 0 -> 1 with zero first and second derivatives at both ends."""
    u = np.clip(u, 0.0, 1.0)
    s = u ** 3 * (10 - 15 * u + 6 * u * u)
    ds = 30 * u ** 2 * (1 - u) ** 2
    dds = 60 * u * (1 - u) * (1 - 2 * u)
    return s, ds, dds


class Trajectory:
    """
    Body motion. ``kinematics`` gives world position, velocity and
    acceleration; ``attitude`` gives (yaw, pitch, roll) and their rates,
    all vectorized over an array of times.
    """

    def kinematics(self, t):
        raise NotImplementedError

    def attitude(self, t):
        raise NotImplementedError

    def sample(self, t):
        """
        Returns:
            tuple: (positions, velocities, quaternions w-first, body angular
                velocities, body specific forces)
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p, v, a = self.kinematics(t)
        angles, rates = self.attitude(t)
        rot = ScipyRotation.from_euler("ZYX", angles)
        yaw_rate, pitch_rate, roll_rate = rates.T
        _, pitch, roll = angles.T
        omega = np.stack([
            roll_rate - yaw_rate * np.sin(pitch),
            pitch_rate * np.cos(roll) + yaw_rate * np.cos(pitch) * np.sin(roll),
            -pitch_rate * np.sin(roll) + yaw_rate * np.cos(pitch) * np.cos(roll),
        ], axis=1)
        force = rot.inv().apply(a - GRAVITY_W)
        q = rot.as_quat()[:, [3, 0, 1, 2]]
        q[q[:, 0] < 0] *= -1.0
        return p, v, q, omega, force


def _wobble(t, amplitude):
    """Small roll/pitch oscillation that keeps every gyro axis excited."""
    roll = amplitude * np.sin(1.7 * t)
    pitch = 0.75 * amplitude * np.sin(1.1 * t + 0.4)
    return pitch, roll, 0.75 * amplitude * 1.1 * np.cos(1.1 * t + 0.4), amplitude * 1.7 * np.cos(1.7 * t)


def _heading(v, a):
    yaw = np.arctan2(v[:, 1], v[:, 0])
    yaw_rate = (v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]) / (v[:, 0] ** 2 + v[:, 1] ** 2)
    return yaw, yaw_rate


class StationaryTrajectory(Trajectory):
    def __init__(self, height=1.5):
        self.height = height

    def kinematics(self, t):
        p = np.zeros((len(t), 3))
        p[:, 2] = self.height
        return p, np.zeros((len(t), 3)), np.zeros((len(t), 3))

    def attitude(self, t):
        return np.zeros((len(t), 3)), np.zeros((len(t), 3))


class StraightTrajectory(Trajectory):
    """Constant velocity along x, then a 90 deg left turn blended over ``turn_time``."""

    def __init__(self, speed, turn_start, turn_time=2.0, bank=0.15, height=1.5):
        self.speed = speed
        self.turn_start = turn_start
        self.turn_time = turn_time
        self.bank = bank
        self.height = height

    def _blend(self, t):
        T = self.turn_time
        u = (t - self.turn_start) / T
        s, ds, dds = _smoothstep(u)
        uc = np.clip(u, 0.0, 1.0)
        # integral of the smoothstep, continued linearly after the turn
        g = T * (2.5 * uc ** 4 - 3 * uc ** 5 + uc ** 6) + T * np.maximum(u - 1.0, 0.0)
        return g, s, ds / T, dds / T ** 2, uc

    def kinematics(self, t):
        g, s, ds, _, _ = self._blend(t)
        v0 = self.speed
        p = np.stack([v0 * (t - g), v0 * g, np.full_like(t, self.height)], axis=1)
        v = np.stack([v0 * (1 - s), v0 * s, np.zeros_like(t)], axis=1)
        a = np.stack([-v0 * ds, v0 * ds, np.zeros_like(t)], axis=1)
        return p, v, a

    def attitude(self, t):
        _, s, ds, _, u = self._blend(t)
        yaw = np.arctan2(s, 1 - s)
        yaw_rate = ds / ((1 - s) ** 2 + s ** 2)
        bump = 16 * u ** 2 * (1 - u) ** 2
        bump_rate = 16 * (2 * u - 6 * u ** 2 + 4 * u ** 3) / self.turn_time
        roll = -self.bank * bump
        roll_rate = -self.bank * bump_rate
        zeros = np.zeros_like(t)
        return np.stack([yaw, zeros, roll], axis=1), np.stack([yaw_rate, zeros, roll_rate], axis=1)


class CircleTrajectory(Trajectory):
    def __init__(self, radius, speed, height=1.5, wobble=0.06):
        self.radius = radius
        self.rate = speed / radius
        self.height = height
        self.wobble = wobble

    def kinematics(self, t):
        r, w = self.radius, self.rate
        c, s = np.cos(w * t), np.sin(w * t)
        p = np.stack([r * c, r * s, np.full_like(t, self.height)], axis=1)
        v = np.stack([-r * w * s, r * w * c, np.zeros_like(t)], axis=1)
        a = np.stack([-r * w * w * c, -r * w * w * s, np.zeros_like(t)], axis=1)
        return p, v, a

    def attitude(self, t):
        pitch, roll, pitch_rate, roll_rate = _wobble(t, self.wobble)
        yaw = self.rate * t + np.pi / 2
        return (np.stack([yaw, pitch, roll], axis=1),
                np.stack([np.full_like(t, self.rate), pitch_rate, roll_rate], axis=1))


class Figure8Trajectory(Trajectory):
    def __init__(self, radius, speed, height=1.5, wobble=0.06, climb=0.2):
        self.a = radius
        self.b = radius / 2
        self.rate = speed / (1.2 * radius)
        self.height = height
        self.wobble = wobble
        self.climb = climb

    def kinematics(self, t):
        A, B, w, h = self.a, self.b, self.rate, self.climb
        p = np.stack([A * np.sin(w * t), B * np.sin(2 * w * t), self.height + h * np.sin(w * t)], axis=1)
        v = np.stack([A * w * np.cos(w * t), 2 * B * w * np.cos(2 * w * t), h * w * np.cos(w * t)], axis=1)
        a = np.stack([-A * w * w * np.sin(w * t), -4 * B * w * w * np.sin(2 * w * t),
                      -h * w * w * np.sin(w * t)], axis=1)
        return p, v, a

    def attitude(self, t):
        _, v, a = self.kinematics(t)
        yaw, yaw_rate = _heading(v, a)
        pitch, roll, pitch_rate, roll_rate = _wobble(t, self.wobble)
        return np.stack([yaw, pitch, roll], axis=1), np.stack([yaw_rate, pitch_rate, roll_rate], axis=1)


class EllipseTrajectory(Trajectory):
    def __init__(self, radius, speed, height=1.5, wobble=0.06, aspect=0.6):
        self.a = radius
        self.b = aspect * radius
        self.rate = speed / radius
        self.height = height
        self.wobble = wobble

    def kinematics(self, t):
        A, B, w = self.a, self.b, self.rate
        c, s = np.cos(w * t), np.sin(w * t)
        p = np.stack([A * c, B * s, np.full_like(t, self.height)], axis=1)
        v = np.stack([-A * w * s, B * w * c, np.zeros_like(t)], axis=1)
        a = np.stack([-A * w * w * c, -B * w * w * s, np.zeros_like(t)], axis=1)
        return p, v, a

    def attitude(self, t):
        _, v, a = self.kinematics(t)
        yaw, yaw_rate = _heading(v, a)
        pitch, roll, pitch_rate, roll_rate = _wobble(t, self.wobble)
        return np.stack([yaw, pitch, roll], axis=1), np.stack([yaw_rate, pitch_rate, roll_rate], axis=1)


def build_trajectory(scenario):
    if scenario.kind == "Stationary":
        return StationaryTrajectory()
    if scenario.kind == "StraightConstantVelocity":
        return StraightTrajectory(scenario.speed, turn_start=0.6 * scenario.duration)
    if scenario.kind == "Circle":
        return CircleTrajectory(scenario.radius, scenario.speed)
    if scenario.kind == "Figure8":
        return Figure8Trajectory(scenario.radius, scenario.speed)
    return EllipseTrajectory(scenario.radius, scenario.speed)


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------

def build_scene(trajectory, duration, count, rng, margin=6.0, headroom=2.5):
    """
    Points on the floor, ceiling and four walls of a box around the path.

    Returns:
        np.ndarray: (count, 3) world points
    """
    p, _, _ = trajectory.kinematics(np.linspace(0.0, duration, max(int(duration * 10), 2)))
    lo = p.min(axis=0) - [margin, margin, 0.0]
    hi = p.max(axis=0) + [margin, margin, 0.0]
    lo[2], hi[2] = 0.0, p[:, 2].max() + headroom
    size = hi - lo
    faces = [
        ("z", lo[2], size[0] * size[1]), ("z", hi[2], size[0] * size[1]),
        ("x", lo[0], size[1] * size[2]), ("x", hi[0], size[1] * size[2]),
        ("y", lo[1], size[0] * size[2]), ("y", hi[1], size[0] * size[2]),
    ]
    areas = np.array([f[2] for f in faces])
    counts = np.floor(count * areas / areas.sum()).astype(int)
    counts[np.argmax(areas)] += count - counts.sum()
    points = []
    for (axis, value, _), n in zip(faces, counts):
        pts = lo + rng.random((n, 3)) * size
        pts[:, "xyz".index(axis)] = value
        points.append(pts)
    return np.concatenate(points)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """Per-sample standard deviations (white noise and bias random-walk steps) and pixel noise."""

    gyro_sigma: float = 0.0
    accel_sigma: float = 0.0
    gyro_walk: float = 0.0
    accel_walk: float = 0.0
    pixel_sigma: float = 0.0

    def __post_init__(self):
        if min(self.gyro_sigma, self.accel_sigma, self.gyro_walk, self.accel_walk, self.pixel_sigma) < 0:
            raise ScenarioError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class PlantedTerms:
    bias_gyro: tuple = (0.0, 0.0, 0.0)
    bias_acc: tuple = (0.0, 0.0, 0.0)
    outlier_fraction: float = 0.0


REALISTIC_NOISE = NoiseModel(gyro_sigma=0.0025, accel_sigma=0.03, gyro_walk=2e-5, accel_walk=3e-4, pixel_sigma=0.5)
REALISTIC_PLANTED = PlantedTerms(bias_gyro=(0.004, -0.003, 0.002), bias_acc=(0.03, -0.02, 0.02))


@dataclass
class GroundTruthBundle:
    """
    A generated recording with everything needed to check an estimate.

    ``bias_gyro`` / ``bias_acc`` hold the bias of every IMU sample (zero for
    exact bundles); ``noise`` and ``planted`` record what ``perturb`` added.
    """

    scenario: Scenario
    rig: StereoRig
    trajectory: Trajectory
    scene: np.ndarray
    right_textured: np.ndarray
    imu_ns: np.ndarray
    imu: list
    frame_ns: np.ndarray
    states: list
    frames: list
    bias_gyro: np.ndarray
    bias_acc: np.ndarray
    noise: NoiseModel = field(default_factory=NoiseModel)
    planted: PlantedTerms = field(default_factory=PlantedTerms)

    @property
    def timestamps(self):
        return [ns_to_seconds(t) for t in self.frame_ns]

    @property
    def samples_per_frame(self):
        return int(round(self.scenario.imu_rate / self.scenario.frame_rate))

    def imu_interval(self, k):
        """IMU samples from frame k-1 to frame k, both ends included."""
        if k <= 0:
            return []
        step = self.samples_per_frame
        return self.imu[(k - 1) * step:k * step + 1]

    def bias_at(self, timestamp):
        """(accel bias, gyro bias) in effect at a timestamp."""
        i = int(np.clip(np.searchsorted(self.imu_ns, round(timestamp * 1e9)), 0, len(self.imu_ns) - 1))
        return self.bias_acc[i].copy(), self.bias_gyro[i].copy()

    def groundtruth(self):
        """True body poses at the frame timestamps."""
        traj = TrajectoryEstimate()
        for s in self.states:
            traj.append(s.timestamp, s.pose)
        return traj

    def visible(self, k, camera="left"):
        """Pixels and point ids of every scene point the camera sees in frame k."""
        t = (int(self.frame_ns[k]) - START_NS) * 1e-9
        if self.scenario.in_blackout(t):
            return np.zeros((0, 2)), np.zeros(0, dtype=int)
        T_w_b = self.states[k].pose
        T_b_c = self.rig.T_body_left if camera == "left" else self.rig.T_body_right
        intr = self.rig.left if camera == "left" else self.rig.right
        return _visible(self.scene, (T_w_b * T_b_c).inverse(), intr,
                        self.right_textured if camera == "right" else None)

    def render(self, k):
        """Left and right images of frame k: Gaussian dots on a dark background."""
        images = []
        for camera, intr in (("left", self.rig.left), ("right", self.rig.right)):
            pixels, _ = self.visible(k, camera)
            images.append(render_dots(pixels, intr.width, intr.height))
        return images[0], images[1]


def _visible(scene, T_c_w, intr, textured=None):
    P = T_c_w.apply(scene)
    pixels, valid = intr.project_points(P)
    depth = P[:, 2]
    mask = valid & (depth > MIN_DEPTH) & (depth < MAX_DEPTH) & intr.contains(pixels, BORDER_PX)
    if textured is not None:
        mask &= textured
    ids = np.flatnonzero(mask)
    return pixels[ids], ids


def render_dots(pixels, width, height, sigma=1.2, radius=4, background=10, amplitude=230):
    """Grayscale uint8 image with a Gaussian dot at every pixel position."""
    image = np.full((height, width), float(background))
    if len(pixels):
        offsets = np.arange(-radius, radius + 1)
        dx, dy = np.meshgrid(offsets, offsets)
        base = np.floor(pixels).astype(int)
        xs = base[:, 0, None, None] + dx[None]
        ys = base[:, 1, None, None] + dy[None]
        values = background + amplitude * np.exp(
            -((xs - pixels[:, 0, None, None]) ** 2 + (ys - pixels[:, 1, None, None]) ** 2) / (2 * sigma ** 2))
        inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        np.maximum.at(image, (ys[inside], xs[inside]), values[inside])
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def _observe(k, timestamp, T_w_b, bundle_parts, tracked, priority):
    """Feature observations of one frame, continuing tracks first."""
    scene, rig, textured, scenario = bundle_parts
    t = timestamp - START_NS * 1e-9
    if scenario.in_blackout(t):
        return StereoFrameFeatures(k, timestamp, []), {}
    T_left = (T_w_b * rig.T_body_left).inverse()
    T_right = (T_w_b * rig.T_body_right).inverse()
    left_px, left_ids = _visible(scene, T_left, rig.left)
    right_px, right_ids = _visible(scene, T_right, rig.right, textured)
    left_map = dict(zip(left_ids.tolist(), left_px))
    right_map = dict(zip(right_ids.tolist(), right_px))
    candidates = set(left_map) | set(right_map)
    continuing = sorted(candidates & set(tracked))
    fresh = sorted(candidates - set(tracked), key=lambda i: priority[i])
    chosen = (continuing + fresh)[:FEATURE_BUDGET]

    observations, lengths = [], {}
    for fid in sorted(chosen):
        left, right = left_map.get(fid), right_map.get(fid)
        if left is not None and right is not None:
            kind = FeatureKind.STEREO_3D
        elif left is not None:
            kind = FeatureKind.LEFT_2D
        else:
            kind = FeatureKind.RIGHT_2D
        lb = rb = None
        if left is not None:
            P = T_left.apply(scene[fid])
            lb = P / np.linalg.norm(P)
        if right is not None:
            P = T_right.apply(scene[fid])
            rb = P / np.linalg.norm(P)
        lengths[fid] = tracked.get(fid, 0) + 1
        observations.append(FeatureObservation(fid, k, kind, left, right, lb, rb, lengths[fid]))
    return StereoFrameFeatures(k, timestamp, observations), lengths


def generate(scenario, rig=None):
    """
    Exact recording of a scenario; identical for identical scenarios.

    Returns:
        GroundTruthBundle
    """
    rig = rig or synthetic_rig()
    rng = np.random.default_rng(scenario.seed)
    trajectory = build_trajectory(scenario)
    scene = build_scene(trajectory, scenario.duration, scenario.points, rng)
    priority = rng.permutation(len(scene))
    right_textured = np.ones(len(scene), dtype=bool)
    if scenario.texture == "LeftOnly":
        right_textured = rng.random(len(scene)) < RIGHT_TEXTURE_FRACTION

    n_imu = int(round(scenario.duration * scenario.imu_rate)) + 1
    imu_step_ns = 1e9 / scenario.imu_rate
    imu_ns = START_NS + np.rint(np.arange(n_imu) * imu_step_ns).astype(np.int64)
    t_imu = (imu_ns - START_NS) * 1e-9
    p, v, q, omega, force = trajectory.sample(t_imu)
    imu = [ImuSample(ns_to_seconds(t), w, f) for t, w, f in zip(imu_ns, omega, force)]

    step = int(round(scenario.imu_rate / scenario.frame_rate))
    frame_index = np.arange(0, n_imu, step)
    frame_ns = imu_ns[frame_index]
    states = [KeyframeState(ns_to_seconds(imu_ns[i]), p[i], v[i], Rotation(q[i])) for i in frame_index]

    parts = (scene, rig, right_textured, scenario)
    frames, tracked = [], {}
    for k, state in enumerate(states):
        features, tracked = _observe(k, state.timestamp, state.pose, parts, tracked, priority)
        frames.append(features)
    logger.info("generated %s: %d frames, %d IMU samples, %d scene points", scenario.kind,
                len(frames), len(imu), len(scene))
    zeros = np.zeros((n_imu, 3))
    return GroundTruthBundle(scenario, rig, trajectory, scene, right_textured, imu_ns, imu, frame_ns,
                             states, frames, zeros, zeros.copy())


def perturb(bundle, noise=NoiseModel(), planted=PlantedTerms(), seed=None):
    """
    Noisy copy of a bundle.

    IMU readings get constant planted biases, random-walk drift and white
    noise; pixels get Gaussian noise and a fraction is replaced by random
    outliers. Bearings are recomputed from the noisy pixels.

    Returns:
        GroundTruthBundle: with ``noise``, ``planted`` and the per-sample
            biases recorded
    """
    seed = bundle.scenario.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    n = len(bundle.imu)
    bg = np.asarray(planted.bias_gyro, dtype=float) + np.cumsum(rng.normal(0.0, noise.gyro_walk, (n, 3)), axis=0)
    ba = np.asarray(planted.bias_acc, dtype=float) + np.cumsum(rng.normal(0.0, noise.accel_walk, (n, 3)), axis=0)
    gyro_noise = rng.normal(0.0, noise.gyro_sigma, (n, 3))
    accel_noise = rng.normal(0.0, noise.accel_sigma, (n, 3))
    imu = [ImuSample(s.timestamp, s.gyro + bg[i] + gyro_noise[i], s.accel + ba[i] + accel_noise[i])
           for i, s in enumerate(bundle.imu)]

    rig = bundle.rig
    frames = []
    for features in bundle.frames:
        observations = []
        for obs in features.observations:
            left, right, lb, rb = obs.left, obs.right, obs.left_bearing, obs.right_bearing
            outlier = planted.outlier_fraction > 0 and rng.random() < planted.outlier_fraction
            if left is not None:
                left, lb = _noisy_pixel(left, rig.left, noise.pixel_sigma, outlier, rng, lb)
            if right is not None:
                right, rb = _noisy_pixel(right, rig.right, noise.pixel_sigma, outlier, rng, rb)
            observations.append(replace(obs, left=left, right=right, left_bearing=lb, right_bearing=rb))
        frames.append(StereoFrameFeatures(features.frame_id, features.timestamp, observations))
    return replace(bundle, imu=imu, frames=frames, bias_gyro=bg, bias_acc=ba, noise=noise, planted=planted)


def _noisy_pixel(pixel, intr, sigma, outlier, rng, bearing):
    if outlier:
        pixel = np.array([rng.uniform(BORDER_PX, intr.width - BORDER_PX),
                          rng.uniform(BORDER_PX, intr.height - BORDER_PX)])
    elif sigma > 0:
        pixel = pixel + rng.normal(0.0, sigma, 2)
    else:
        return pixel, bearing
    bearings, _ = intr.unproject_points(pixel[None])
    return pixel, bearings[0]


def simulate(scenario, rig=None):
    """``generate`` plus the scenario's noise level."""
    bundle = generate(scenario, rig)
    if scenario.noise == "realistic":
        bundle = perturb(bundle, REALISTIC_NOISE, REALISTIC_PLANTED)
    return bundle


def export_bundle(bundle, root):
    """Write a bundle as an ASL recording with rendered dot images."""
    frames = ((int(t), *bundle.render(k)) for k, t in enumerate(bundle.frame_ns))
    step = bundle.samples_per_frame
    groundtruth = [(int(bundle.frame_ns[k]), s.pose, s.velocity, bundle.bias_gyro[k * step], bundle.bias_acc[k * step])
                   for k, s in enumerate(bundle.states)]
    return export_euroc(root, frames, bundle.imu, bundle.imu_ns, groundtruth)
