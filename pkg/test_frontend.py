"""
Tests for the visual frontend: pyramids, corner detection, KLT tracking,
stereo matching, epipolar outlier rejection and keyframe selection.
"""

import cv2
import numpy as np
import pytest

from odometry.errors import TooFewPairs
from odometry.frontend import (
    FeatureKind,
    FeatureObservation,
    FeatureTracker,
    KeyframeRule,
    KeyframeThresholds,
    StereoFrameFeatures,
    TrackerSettings,
    build_pyramid,
    detect_features,
    epipolar_ransac,
    mean_parallax,
    select_keyframe,
    stereo_match,
    track_features,
)
from odometry.geometry import CameraIntrinsics, Rotation, StereoRig, Transform

DISPARITY = 6


@pytest.fixture(scope="module")
def texture():
    rng = np.random.default_rng(42)
    noise = rng.integers(0, 256, size=(480, 752)).astype(np.uint8)
    smooth = cv2.GaussianBlur(noise, (0, 0), 2.0)
    return cv2.normalize(smooth, None, 0, 255, cv2.NORM_MINMAX)


@pytest.fixture(scope="module")
def rectified_rig():
    intr = CameraIntrinsics(460.0, 460.0, 376.0, 240.0, width=752, height=480)
    return StereoRig(intr, intr, Transform(Rotation.identity(), [0.1, 0.0, 0.0]), Transform.identity())


def shift(image, du, dv=0):
    """Content moves by (du, dv) pixels."""
    return np.roll(np.roll(image, dv, axis=0), du, axis=1)


def interior(points, margin=40, width=752, height=480):
    return ((points[:, 0] > margin) & (points[:, 0] < width - margin)
            & (points[:, 1] > margin) & (points[:, 1] < height - margin))


def min_spacing(points, others=None):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    others = points if others is None else np.asarray(others, dtype=float).reshape(-1, 2)
    d = np.linalg.norm(points[:, None, :] - others[None, :, :], axis=2)
    if others is points:
        np.fill_diagonal(d, np.inf)
    return d.min() if d.size else np.inf


def zoomed(image, scale):
    h, w = image.shape
    warp = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), 0.0, scale)
    return cv2.warpAffine(image, warp, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)


# ---------------------------------------------------------------------------
# pyramids / detection
# ---------------------------------------------------------------------------

def test_pyramid_levels_halve(texture):
    pyramid = build_pyramid(texture, 4)
    assert pyramid.depth == 4
    assert [img.shape for img in pyramid.levels] == [(480, 752), (240, 376), (120, 188), (60, 94)]
    assert len(pyramid.gradients) == 4
    du, dv = pyramid.gradients[2]
    assert du.shape == dv.shape == (120, 188)
    assert du.dtype == np.float32
    # built once
    assert pyramid.gradients is pyramid.gradients


def test_pyramid_rejects_unsupported_depth(texture):
    with pytest.raises(ValueError):
        build_pyramid(texture, 3)


def test_detect_respects_budget_and_spacing(texture):
    corners = detect_features(texture, np.zeros((0, 2)), 50, min_distance=20.0)
    assert 0 < len(corners) <= 50
    assert min_spacing(corners) >= 20.0


def test_detect_skips_existing_features(texture):
    existing = detect_features(texture, np.zeros((0, 2)), 30, min_distance=20.0)
    more = detect_features(texture, existing, 80, min_distance=20.0)
    assert len(more) <= 50
    assert min_spacing(more, existing) >= 20.0
    assert min_spacing(more) >= 20.0


def test_detect_full_budget_returns_nothing(texture):
    existing = np.zeros((10, 2))
    assert detect_features(texture, existing, 10).shape == (0, 2)


# ---------------------------------------------------------------------------
# tracking / stereo matching
# ---------------------------------------------------------------------------

def test_klt_recovers_image_shift(texture):
    prev = build_pyramid(texture)
    curr = build_pyramid(shift(texture, 3, 2))
    points = detect_features(texture, np.zeros((0, 2)), 100)
    points = points[interior(points)]
    tracked, status = track_features(prev, curr, points)
    assert status.mean() > 0.9
    assert np.allclose(np.median(tracked[status] - points[status], axis=0), [3.0, 2.0], atol=0.1)


def test_klt_follows_large_motion_through_levels(texture):
    prev = build_pyramid(texture)
    curr = build_pyramid(shift(texture, 24, -8))
    points = detect_features(texture, np.zeros((0, 2)), 100)
    points = points[interior(points, margin=60)]
    tracked, status = track_features(prev, curr, points, levels=4)
    assert status.mean() > 0.8
    assert np.allclose(np.median(tracked[status] - points[status], axis=0), [24.0, -8.0], atol=0.1)


def test_klt_uses_initial_guess(texture):
    prev = build_pyramid(texture, 2)
    curr = build_pyramid(shift(texture, 30), 2)
    points = detect_features(texture, np.zeros((0, 2)), 60)
    points = points[interior(points, margin=60)]
    tracked, status = track_features(prev, curr, points, levels=2, guess=points + [29.0, 0.0])
    assert status.mean() > 0.8
    assert np.allclose(tracked[status, 0] - points[status, 0], 30.0, atol=0.1)


def test_klt_with_no_points(texture):
    pyramid = build_pyramid(texture)
    tracked, status = track_features(pyramid, pyramid, np.zeros((0, 2)))
    assert tracked.shape == (0, 2)
    assert status.shape == (0,)


def test_klt_rejects_deeper_request_than_pyramid(texture):
    shallow = build_pyramid(texture, 2)
    with pytest.raises(ValueError):
        track_features(shallow, shallow, np.array([[100.0, 100.0]]), levels=4)


def test_stereo_match_rectified_without_rig(texture):
    left = build_pyramid(texture)
    right = build_pyramid(shift(texture, -DISPARITY))
    points = detect_features(texture, np.zeros((0, 2)), 80)
    points = points[interior(points)]
    matched, status, _ = stereo_match(left, right, points)
    assert status.mean() > 0.9
    disparity = points[status, 0] - matched[status, 0]
    assert np.median(disparity) == pytest.approx(DISPARITY, abs=0.1)
    assert np.abs(points[status, 1] - matched[status, 1]).max() <= 1.5


def test_stereo_match_gates_off_epipolar_matches(texture, rectified_rig):
    left = build_pyramid(texture)
    right = build_pyramid(shift(texture, -DISPARITY, 5))
    points = detect_features(texture, np.zeros((0, 2)), 80)
    points = points[interior(points)]
    _, status, _ = stereo_match(left, right, points, rectified_rig)
    assert not status.any()


# ---------------------------------------------------------------------------
# epipolar RANSAC
# ---------------------------------------------------------------------------

def two_view_bearings(rng, n=60):
    points = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(4, 12, n)])
    T_c1_c0 = Transform(Rotation.exp([0.0, 0.05, 0.01]), [0.3, 0.0, 0.05])
    b0 = points / np.linalg.norm(points, axis=1, keepdims=True)
    p1 = T_c1_c0.apply(points)
    b1 = p1 / np.linalg.norm(p1, axis=1, keepdims=True)
    return b0, b1


def test_epipolar_ransac_needs_eight_pairs(rng):
    b0, b1 = two_view_bearings(rng, 7)
    with pytest.raises(TooFewPairs):
        epipolar_ransac(b0, b1)


def test_epipolar_ransac_rejects_outliers(rng):
    b0, b1 = two_view_bearings(rng)
    bad = np.arange(8)
    b1[bad] = b1[bad] + np.array([0.05, -0.04, 0.0])
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    mask = epipolar_ransac(b0, b1, threshold_px=1.0, focal_px=460.0)
    assert not mask[bad].any()
    assert mask[8:].mean() > 0.95


# ---------------------------------------------------------------------------
# keyframe selection
# ---------------------------------------------------------------------------

def frame_of(frame_id, timestamp, bearings, kind=FeatureKind.STEREO_3D, ids=None):
    ids = range(len(bearings)) if ids is None else ids
    observations = [FeatureObservation(i, frame_id, kind, left_bearing=b / np.linalg.norm(b),
                                       right_bearing=b / np.linalg.norm(b) if kind is FeatureKind.STEREO_3D else None)
                    for i, b in zip(ids, bearings)]
    return StereoFrameFeatures(frame_id, timestamp, observations)


def grid_bearings(n=30, offset=0.0):
    xs = np.linspace(-0.5, 0.5, n)
    return np.column_stack([xs + offset, 0.2 * np.sin(np.arange(n)), np.ones(n)])


THRESHOLDS = KeyframeThresholds(max_interval_s=1.0, min_parallax_px=10.0, min_tracked=20, focal_px=460.0)


def test_first_frame_is_keyframe():
    decision = select_keyframe(frame_of(0, 0.0, grid_bearings()), None, thresholds=THRESHOLDS)
    assert decision.is_keyframe
    assert decision.rule is KeyframeRule.TIME_INTERVAL


def test_time_interval_rule():
    last = frame_of(0, 0.0, grid_bearings())
    decision = select_keyframe(frame_of(1, 1.5, grid_bearings()), last, thresholds=THRESHOLDS)
    assert decision.rule is KeyframeRule.TIME_INTERVAL


def test_parallax_rule_measures_pixels():
    last = frame_of(0, 0.0, grid_bearings())
    current = frame_of(1, 0.1, grid_bearings(offset=20.0 / 460.0))
    decision = select_keyframe(current, last, thresholds=THRESHOLDS)
    assert decision.rule is KeyframeRule.PARALLAX
    assert decision.parallax_px == pytest.approx(20.0, abs=1e-6)


def test_parallax_is_rotation_compensated():
    last = frame_of(0, 0.0, grid_bearings())
    R = Rotation.exp([0.0, 0.05, 0.0])
    current = frame_of(1, 0.1, R.apply(grid_bearings()))
    assert mean_parallax(current, last, None, 460.0) > 10.0
    decision = select_keyframe(current, last, R, THRESHOLDS)
    assert not decision.is_keyframe
    assert decision.rule is KeyframeRule.NONE
    assert decision.parallax_px < 1e-6


def test_tracked_count_rule():
    last = frame_of(0, 0.0, grid_bearings(10))
    decision = select_keyframe(frame_of(1, 0.1, grid_bearings(10)), last, thresholds=THRESHOLDS)
    assert decision.rule is KeyframeRule.TRACKED_COUNT


def test_depth_initialized_mono_features_count_as_tracked():
    bearings = grid_bearings(30)
    last = frame_of(0, 0.0, bearings, FeatureKind.LEFT_2D)
    current = frame_of(1, 0.1, bearings, FeatureKind.LEFT_2D)
    assert select_keyframe(current, last, thresholds=THRESHOLDS).rule is KeyframeRule.TRACKED_COUNT
    decision = select_keyframe(current, last, thresholds=THRESHOLDS, depth_initialized=frozenset(range(30)))
    assert not decision.is_keyframe


def test_parallax_ignores_unmatched_ids():
    last = frame_of(0, 0.0, grid_bearings(), ids=range(30))
    current = frame_of(1, 0.1, grid_bearings(offset=0.2), ids=range(100, 130))
    assert mean_parallax(current, last) == 0.0


# ---------------------------------------------------------------------------
# stateful tracker
# ---------------------------------------------------------------------------

def test_tracker_classifies_and_keeps_ids(texture, rectified_rig):
    tracker = FeatureTracker(rectified_rig, TrackerSettings(max_features=120))
    first = tracker.process(0, 0.0, texture, shift(texture, -DISPARITY))
    assert 0 < len(first) <= 120
    counts = first.counts
    assert counts[FeatureKind.STEREO_3D] > 0.7 * len(first)
    for obs in first.stereo:
        assert obs.left[0] - obs.right[0] == pytest.approx(DISPARITY, abs=0.2)
        assert obs.track_length == 1

    second = tracker.process(1, 0.05, shift(texture, 3), shift(texture, 3 - DISPARITY))
    old = first.by_id()
    kept = [o for o in second.observations if o.feature_id in old]
    assert len(kept) > 0.7 * len(first)
    for obs in kept:
        assert obs.track_length == 2
        if obs.left is not None and old[obs.feature_id].left is not None and interior(obs.left[None])[0]:
            assert obs.left[0] - old[obs.feature_id].left[0] == pytest.approx(3.0, abs=0.2)
    fresh = [o.feature_id for o in second.observations if o.feature_id not in old]
    if fresh:
        assert min(fresh) > max(old)
    assert len(second) <= 120


def test_tracker_keeps_spacing_while_zooming_out(texture, rectified_rig):
    tracker = FeatureTracker(rectified_rig, TrackerSettings(max_features=150))
    for k in range(8):
        left = zoomed(texture, 0.93 ** k)
        frame = tracker.process(k, 0.05 * k, left, shift(left, -DISPARITY))
        assert 0 < len(frame) <= 150
        lefts = [o.left for o in frame.observations if o.left is not None]
        assert min_spacing(lefts) >= 20.0 - 1e-9, f"frame {k}"
        right_only = [o.right for o in frame.right2d]
        assert min_spacing(right_only) >= 20.0 - 1e-9, f"frame {k}"
    # the survivors are the long tracks
    assert max(o.track_length for o in frame.observations) > 1
