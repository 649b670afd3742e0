"""
Stereo-Inertial Odometry - Feature Frontend

Shi-Tomasi corners refined to sub-pixel precision, pyramidal Lucas-Kanade
tracking (four levels for monocular features, two for stereo features with
a four-level retry), stereo matching under the epipolar constraint,
epipolar RANSAC and the three keyframe rules.

Every tracked corner is tagged:

- Stereo3D: matched in both images, depth from the baseline
- Left2D:   seen in the left image only
- Right2D:  seen in the right image only (right corners that fail to
            match back into the left image)

License: MIT
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import cv2
import numpy as np

from odometry.errors import TooFewPairs

logger = logging.getLogger(__name__)


class FeatureKind(Enum):
    LEFT_2D = "Left2D"
    RIGHT_2D = "Right2D"
    STEREO_3D = "Stereo3D"


class KeyframeRule(Enum):
    TIME_INTERVAL = "TimeInterval"
    PARALLAX = "Parallax"
    TRACKED_COUNT = "TrackedCount"
    NONE = "None"


@dataclass
class ImagePyramid:
    """Grayscale pyramid, level 0 full resolution, with Sobel gradients."""

    levels: list

    @cached_property
    def gradients(self):
        """Per-level (d/du, d/dv) Sobel images, built on first use."""
        return [(cv2.Sobel(img, cv2.CV_32F, 1, 0, ksize=3), cv2.Sobel(img, cv2.CV_32F, 0, 1, ksize=3))
                for img in self.levels]

    @property
    def depth(self):
        return len(self.levels)

    @property
    def base(self):
        return self.levels[0]


def build_pyramid(image, levels=4):
    """
    Build an image pyramid whose dimensions halve (floor) per level.

    Args:
        image (np.ndarray): 8-bit grayscale image
        levels (int): 2 or 4

    Returns:
        ImagePyramid
    """
    if levels not in (2, 4):
        raise ValueError(f"pyramid depth must be 2 or 4, got {levels}")
    image = np.ascontiguousarray(image, dtype=np.uint8)
    images = [image]
    for _ in range(levels - 1):
        prev = images[-1]
        down = cv2.pyrDown(prev)
        images.append(np.ascontiguousarray(down[:prev.shape[0] // 2, :prev.shape[1] // 2]))
    return ImagePyramid(images)


@dataclass
class FeatureObservation:
    """
    One feature in one frame. ``left``/``right`` are pixels or None, the
    bearings are unit vectors in the respective camera.
    """

    feature_id: int
    frame_id: int
    kind: FeatureKind
    left: np.ndarray = None
    right: np.ndarray = None
    left_bearing: np.ndarray = None
    right_bearing: np.ndarray = None
    track_length: int = 1

    @property
    def is_stereo(self):
        return self.kind is FeatureKind.STEREO_3D


@dataclass
class StereoFrameFeatures:
    frame_id: int
    timestamp: float
    observations: list = field(default_factory=list)

    def of_kind(self, kind):
        return [o for o in self.observations if o.kind is kind]

    @property
    def stereo(self):
        return self.of_kind(FeatureKind.STEREO_3D)

    @property
    def left2d(self):
        return self.of_kind(FeatureKind.LEFT_2D)

    @property
    def right2d(self):
        return self.of_kind(FeatureKind.RIGHT_2D)

    @property
    def counts(self):
        counts = {kind: 0 for kind in FeatureKind}
        for o in self.observations:
            counts[o.kind] += 1
        return counts

    def by_id(self):
        return {o.feature_id: o for o in self.observations}

    def __len__(self):
        return len(self.observations)


@dataclass
class KeyframeDecision:
    is_keyframe: bool
    rule: KeyframeRule = KeyframeRule.NONE
    parallax_px: float = 0.0


@dataclass(frozen=True)
class KeyframeThresholds:
    max_interval_s: float = 1.0
    min_parallax_px: float = 10.0
    min_tracked: int = 20
    focal_px: float = 460.0


@dataclass(frozen=True)
class TrackerSettings:
    max_features: int = 150
    min_distance_px: float = 20.0
    quality_level: float = 0.01
    subpix_window: int = 5
    subpix_max_iterations: int = 20
    subpix_epsilon: float = 0.01
    klt_window: int = 21
    klt_max_iterations: int = 30
    fb_threshold_px: float = 0.5
    epipolar_tolerance_px: float = 1.5
    ransac_threshold_px: float = 1.0
    ransac_confidence: float = 0.99
    seed: int = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(
            cfg["frontend.max_features"], cfg["frontend.min_distance_px"], cfg["frontend.quality_level"],
            cfg["frontend.subpix_window"], cfg["frontend.subpix_max_iterations"], cfg["frontend.subpix_epsilon"],
            cfg["frontend.klt_window"], cfg["frontend.klt_max_iterations"], cfg["frontend.fb_threshold_px"],
            cfg["frontend.epipolar_tolerance_px"], cfg["frontend.ransac_threshold_px"],
            cfg["frontend.ransac_confidence"], cfg["run.seed"],
        )


# ---------------------------------------------------------------------------
# detection / tracking
# ---------------------------------------------------------------------------

def _spaced(points, min_distance, kept=None):
    """
    Greedy spacing filter in input order.

    A point survives when it lies at least ``min_distance`` from every
    earlier survivor and from every ``kept`` anchor.

    Returns:
        np.ndarray: (n,) bool keep mask
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    anchors = [] if kept is None else list(np.asarray(kept, dtype=float).reshape(-1, 2))
    keep = np.zeros(len(points), dtype=bool)
    limit = min_distance * min_distance
    for i, p in enumerate(points):
        if anchors and np.min(np.sum((np.asarray(anchors) - p) ** 2, axis=1)) < limit:
            continue
        keep[i] = True
        anchors.append(p)
    return keep


def detect_features(image, existing, budget, min_distance=20.0, quality_level=0.01,
                    subpix_window=5, subpix_max_iterations=20, subpix_epsilon=0.01):
    """
    Shi-Tomasi corners outside a minimum-distance mask, refined to sub-pixel.

    Args:
        image (np.ndarray): 8-bit grayscale image
        existing: (k, 2) pixels already tracked
        budget (int): total feature budget including ``existing``

    Returns:
        np.ndarray: (n, 2) float corners, n <= budget - k, all at least
        ``min_distance`` from each other and from ``existing``
    """
    existing = np.asarray(existing, dtype=float).reshape(-1, 2)
    wanted = budget - len(existing)
    if wanted <= 0:
        return np.zeros((0, 2))
    mask = np.full(image.shape[:2], 255, dtype=np.uint8)
    radius = max(int(round(min_distance)), 1)
    for u, v in existing:
        cv2.circle(mask, (int(round(u)), int(round(v))), radius, 0, -1)
    corners = cv2.goodFeaturesToTrack(image, maxCorners=int(wanted), qualityLevel=quality_level,
                                      minDistance=min_distance, mask=mask, useHarrisDetector=False)
    if corners is None:
        return np.zeros((0, 2))
    corners = corners.astype(np.float32)
    half = subpix_window // 2
    criteria = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_COUNT, subpix_max_iterations, subpix_epsilon)
    cv2.cornerSubPix(image, corners, (half, half), (-1, -1), criteria)
    corners = corners.reshape(-1, 2).astype(float)
    # refinement and the rasterised mask can both bring corners under the spacing
    return corners[_spaced(corners, min_distance, existing)]


def _lk(prev, next, points, guess, levels, window, max_iterations):
    """Coarse-to-fine Lucas-Kanade over the first ``levels`` pyramid levels."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 2)
    criteria = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_COUNT, max_iterations, 0.001)
    top = levels - 1
    if guess is None:
        flow = np.zeros_like(points)
    else:
        flow = (np.asarray(guess, dtype=np.float32).reshape(-1, 2) - points) / 2.0 ** top
    status = np.zeros(len(points), dtype=bool)
    for lvl in range(top, -1, -1):
        scaled = points / 2.0 ** lvl
        start = (scaled + flow).reshape(-1, 1, 2).copy()
        tracked, st, _ = cv2.calcOpticalFlowPyrLK(
            prev.levels[lvl], next.levels[lvl], scaled.reshape(-1, 1, 2), start,
            winSize=(window, window), maxLevel=0, flags=cv2.OPTFLOW_USE_INITIAL_FLOW, criteria=criteria)
        status = st.reshape(-1).astype(bool)
        tracked = tracked.reshape(-1, 2)
        # a point lost on a coarse level keeps its flow estimate and gets another try below
        flow = np.where(status[:, None], tracked - scaled, flow)
        if lvl:
            flow = flow * 2.0
    return (points + flow).astype(float), status


def _in_bounds(points, shape):
    h, w = shape[:2]
    return ((points[:, 0] >= 0) & (points[:, 0] <= w - 1)
            & (points[:, 1] >= 0) & (points[:, 1] <= h - 1))


def track_features(prev, next, points, levels=4, window=21, max_iterations=30,
                   fb_threshold=0.5, guess=None):
    """
    Coarse-to-fine Lucas-Kanade with a forward-backward check.

    Returns:
        tuple: (tracked (n, 2), status (n,) bool)
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    if levels > min(prev.depth, next.depth):
        raise ValueError(f"{levels} levels requested from shallower pyramids")
    forward, st_f = _lk(prev, next, points, guess, levels, window, max_iterations)
    backward, st_b = _lk(next, prev, forward, points, levels, window, max_iterations)
    fb_error = np.linalg.norm(points - backward, axis=1)
    status = (st_f & st_b & (fb_error < fb_threshold)
              & np.all(np.isfinite(forward), axis=1) & _in_bounds(forward, next.base.shape))
    return forward, status


def epipolar_errors(rig, left_points, right_points):
    """Pixel distance of right points from the epipolar plane of left points."""
    T_rl = rig.T_left_right.inverse()
    bl, _ = rig.left.unproject_points(left_points)
    br, _ = rig.right.unproject_points(right_points)
    normals = np.cross(T_rl.translation, T_rl.rotation.apply(bl))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return np.abs(np.einsum("ij,ij->i", normals, br)) * rig.right.focal


def stereo_match(left, right, left_points, rig=None, settings=TrackerSettings()):
    """
    Find left features in the right image.

    Two-level KLT seeded on the epipolar line, retried with four levels
    where the first pass loses the point. Without a rig the pair is treated
    as rectified and the epipolar line is the image row.

    Returns:
        tuple: (right points (n, 2), status (n,), retried (n,))
    """
    left_points = np.asarray(left_points, dtype=float).reshape(-1, 2)
    n = len(left_points)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool), np.zeros(0, dtype=bool)
    if rig is not None:
        T_rl = rig.T_left_right.inverse()
        bl, _ = rig.left.unproject_points(left_points)
        seed, valid = rig.right.project_points(T_rl.apply(bl * 1e3))
        seed = np.where(valid[:, None], seed, left_points)
    else:
        seed = left_points.copy()

    def gate(points, status):
        if rig is not None:
            err = epipolar_errors(rig, left_points, points)
        else:
            err = np.abs(points[:, 1] - left_points[:, 1])
        return status & (err <= settings.epipolar_tolerance_px)

    matched, status = track_features(left, right, left_points, 2, settings.klt_window,
                                     settings.klt_max_iterations, settings.fb_threshold_px, seed)
    status = gate(matched, status)
    retried = ~status
    if retried.any():
        again, st_again = track_features(left, right, left_points[retried], 4, settings.klt_window,
                                         settings.klt_max_iterations, settings.fb_threshold_px, seed[retried])
        matched[retried] = again
        status[retried] = st_again
        status = gate(matched, status)
    return matched, status, retried


def epipolar_ransac(bearings_prev, bearings_curr, threshold_px=1.0, focal_px=460.0,
                    confidence=0.99, seed=0):
    """
    Essential-matrix RANSAC over bearing pairs.

    Returns:
        np.ndarray: inlier mask

    Raises:
        TooFewPairs: fewer than 8 pairs
    """
    b0 = np.asarray(bearings_prev, dtype=float).reshape(-1, 3)
    b1 = np.asarray(bearings_curr, dtype=float).reshape(-1, 3)
    if len(b0) < 8:
        raise TooFewPairs(f"epipolar RANSAC needs 8 pairs, got {len(b0)}")
    front = (b0[:, 2] > 1e-6) & (b1[:, 2] > 1e-6)
    mask = np.zeros(len(b0), dtype=bool)
    if front.sum() < 8:
        return front
    x0 = b0[front, :2] / b0[front, 2:3]
    x1 = b1[front, :2] / b1[front, 2:3]
    cv2.setRNGSeed(seed)
    E, inliers = cv2.findEssentialMat(x1, x0, focal=1.0, pp=(0.0, 0.0), method=cv2.RANSAC,
                                      prob=confidence, threshold=threshold_px / focal_px)
    if E is None or inliers is None:
        mask[front] = True
        return mask
    mask[np.flatnonzero(front)] = inliers.reshape(-1).astype(bool)
    return mask


# ---------------------------------------------------------------------------
# keyframes
# ---------------------------------------------------------------------------

def mean_parallax(current, last_kf, rotation=None, focal_px=460.0):
    """
    Mean rotation-compensated parallax in pixels over features seen in the
    left camera of both frames. ``rotation`` maps last-keyframe camera
    coordinates into the current camera.
    """
    previous = last_kf.by_id()
    R = np.eye(3) if rotation is None else rotation.matrix()
    shifts = []
    for obs in current.observations:
        old = previous.get(obs.feature_id)
        if old is None or obs.left_bearing is None or old.left_bearing is None:
            continue
        predicted = R @ old.left_bearing
        if predicted[2] <= 0 or obs.left_bearing[2] <= 0:
            continue
        shifts.append(np.linalg.norm(obs.left_bearing[:2] / obs.left_bearing[2] - predicted[:2] / predicted[2]))
    return focal_px * float(np.mean(shifts)) if shifts else 0.0


def select_keyframe(current, last_kf, rotation=None, thresholds=KeyframeThresholds(),
                    depth_initialized=frozenset()):
    """
    Apply the three keyframe rules in order: time gap, parallax, tracked count.

    Args:
        current (StereoFrameFeatures): candidate frame
        last_kf (StereoFrameFeatures): last keyframe, None for the first frame
        rotation (Rotation): gyro rotation from the last keyframe camera to the current one
        thresholds (KeyframeThresholds): rule thresholds
        depth_initialized: ids of 2D features that already carry depth

    Returns:
        KeyframeDecision
    """
    if last_kf is None:
        return KeyframeDecision(True, KeyframeRule.TIME_INTERVAL)
    if current.timestamp - last_kf.timestamp > thresholds.max_interval_s:
        return KeyframeDecision(True, KeyframeRule.TIME_INTERVAL)
    parallax = mean_parallax(current, last_kf, rotation, thresholds.focal_px)
    if parallax > thresholds.min_parallax_px:
        return KeyframeDecision(True, KeyframeRule.PARALLAX, parallax)
    tracked = sum(1 for o in current.observations
                  if o.is_stereo or o.feature_id in depth_initialized)
    if tracked < thresholds.min_tracked:
        return KeyframeDecision(True, KeyframeRule.TRACKED_COUNT, parallax)
    return KeyframeDecision(False, KeyframeRule.NONE, parallax)


# ---------------------------------------------------------------------------
# stateful tracker
# ---------------------------------------------------------------------------

class FeatureTracker:
    """
    Owns the previous pyramids, the live tracks and the id counter.

    Ids are unique and never reused: a lost track takes its id with it.
    """

    def __init__(self, rig, settings=TrackerSettings()):
        self.rig = rig
        self.settings = settings
        self._next_id = 0
        self._prev = None
        # id -> [left pixel or None, right pixel or None, track length]
        self._tracks = {}

    def _new_id(self):
        self._next_id += 1
        return self._next_id - 1

    def _min_distance(self, image):
        return self.settings.min_distance_px * image.shape[1] / 752.0

    def process(self, frame_id, timestamp, left_image, right_image):
        """Track, match and replenish features for one stereo frame."""
        s = self.settings
        left = build_pyramid(left_image, 4)
        right = build_pyramid(right_image, 4)
        tracks = {}
        if self._prev is not None:
            tracks = self._track_previous(self._prev, left, right)
        self._prev = (left, right)

        # stereo matching of every left track
        left_ids = [fid for fid, t in tracks.items() if t[0] is not None]
        if left_ids:
            pts = np.array([tracks[fid][0] for fid in left_ids])
            matched, status, _ = stereo_match(left, right, pts, self.rig, s)
            for fid, uv, ok in zip(left_ids, matched, status):
                tracks[fid][1] = uv if ok else None

        min_dist = self._min_distance(left_image)
        tracks = self._cull_crowded(tracks, min_dist)

        # replenish left corners
        existing = np.array([t[0] for t in tracks.values() if t[0] is not None]).reshape(-1, 2)
        new_left = detect_features(left.base, existing, s.max_features - len(tracks) + len(existing),
                                   min_dist, s.quality_level, s.subpix_window,
                                   s.subpix_max_iterations, s.subpix_epsilon)
        if len(new_left):
            matched, status, _ = stereo_match(left, right, new_left, self.rig, s)
            for uv, ruv, ok in zip(new_left, matched, status):
                tracks[self._new_id()] = [uv, ruv if ok else None, 1]

        # right-only corners that do not match back into the left image
        room = s.max_features - len(tracks)
        if room > 0:
            occupied = np.array([t[1] for t in tracks.values() if t[1] is not None]).reshape(-1, 2)
            candidates = detect_features(right.base, occupied, room + len(occupied), min_dist,
                                         s.quality_level, s.subpix_window,
                                         s.subpix_max_iterations, s.subpix_epsilon)
            if len(candidates):
                _, back_ok = track_features(right, left, candidates, 2, s.klt_window,
                                            s.klt_max_iterations, s.fb_threshold_px)
                for uv in candidates[~back_ok][:room]:
                    tracks[self._new_id()] = [None, uv, 1]

        self._tracks = tracks
        return self._observations(frame_id, timestamp, tracks)

    def _cull_crowded(self, tracks, min_dist):
        """
        Drop tracks that converged closer than ``min_dist``.

        Longer tracks win: left pixels are spaced first, then right-only
        pixels against every surviving right pixel.
        """
        by_age = sorted(tracks, key=lambda f: (-tracks[f][2], f))
        left_ids = [f for f in by_age if tracks[f][0] is not None]
        keep = _spaced([tracks[f][0] for f in left_ids], min_dist)
        culled = [f for f, ok in zip(left_ids, keep) if not ok]
        for f in culled:
            del tracks[f]
        right_ids = [f for f in by_age if f in tracks and tracks[f][0] is None]
        anchors = [t[1] for t in tracks.values() if t[0] is not None and t[1] is not None]
        keep = _spaced([tracks[f][1] for f in right_ids], min_dist, anchors)
        for f, ok in zip(right_ids, keep):
            if not ok:
                del tracks[f]
                culled.append(f)
        if culled:
            logger.debug("culled %d crowded tracks", len(culled))
        return tracks

    def _track_previous(self, prev, left, right):
        s = self.settings
        prev_left, prev_right = prev
        tracks = {}
        stereo_ids = [fid for fid, t in self._tracks.items() if t[0] is not None and t[1] is not None]
        mono_ids = [fid for fid, t in self._tracks.items() if t[0] is not None and t[1] is None]
        right_ids = [fid for fid, t in self._tracks.items() if t[0] is None]

        results = {}
        if stereo_ids:
            pts = np.array([self._tracks[f][0] for f in stereo_ids])
            out, ok = track_features(prev_left, left, pts, 2, s.klt_window, s.klt_max_iterations, s.fb_threshold_px)
            if (~ok).any():
                again, ok_again = track_features(prev_left, left, pts[~ok], 4, s.klt_window,
                                                 s.klt_max_iterations, s.fb_threshold_px)
                out[~ok], ok[~ok] = again, ok_again
            results.update({f: (uv, good, "left") for f, uv, good in zip(stereo_ids, out, ok)})
        if mono_ids:
            pts = np.array([self._tracks[f][0] for f in mono_ids])
            out, ok = track_features(prev_left, left, pts, 4, s.klt_window, s.klt_max_iterations, s.fb_threshold_px)
            results.update({f: (uv, good, "left") for f, uv, good in zip(mono_ids, out, ok)})
        if right_ids:
            pts = np.array([self._tracks[f][1] for f in right_ids])
            out, ok = track_features(prev_right, right, pts, 4, s.klt_window, s.klt_max_iterations, s.fb_threshold_px)
            results.update({f: (uv, good, "right") for f, uv, good in zip(right_ids, out, ok)})

        for side, intr, slot in (("left", self.rig.left, 0), ("right", self.rig.right, 1)):
            ids = [f for f, (_, good, sd) in results.items() if good and sd == side]
            if len(ids) >= 8:
                b_prev, _ = intr.unproject_points(np.array([self._tracks[f][slot] for f in ids]))
                b_curr, _ = intr.unproject_points(np.array([results[f][0] for f in ids]))
                inliers = epipolar_ransac(b_prev, b_curr, s.ransac_threshold_px, intr.focal,
                                          s.ransac_confidence, s.seed)
                for f, keep in zip(ids, inliers):
                    if not keep:
                        results[f] = (results[f][0], False, side)

        for f, (uv, good, side) in results.items():
            if not good:
                continue
            length = self._tracks[f][2] + 1
            tracks[f] = [uv, None, length] if side == "left" else [None, uv, length]
        logger.debug("tracked %d of %d features", len(tracks), len(self._tracks))
        return tracks

    def _observations(self, frame_id, timestamp, tracks):
        frame = StereoFrameFeatures(frame_id, timestamp)
        for fid in sorted(tracks):
            left_px, right_px, length = tracks[fid]
            bl = br = None
            if left_px is not None:
                bearing, ok = self.rig.left.unproject_points(left_px)
                if not ok[0]:
                    continue
                bl = bearing[0]
            if right_px is not None:
                bearing, ok = self.rig.right.unproject_points(right_px)
                if ok[0]:
                    br = bearing[0]
                elif bl is None:
                    continue
                else:
                    right_px = None
            if bl is not None and br is not None:
                kind = FeatureKind.STEREO_3D
            elif bl is not None:
                kind = FeatureKind.LEFT_2D
            else:
                kind = FeatureKind.RIGHT_2D
            frame.observations.append(FeatureObservation(
                fid, frame_id, kind,
                None if left_px is None else np.asarray(left_px, dtype=float),
                None if right_px is None else np.asarray(right_px, dtype=float),
                bl, br, length))
        return frame
