"""
Tests for odometry.loop_closure: descriptors, the vocabulary tree and its
file format, the keyframe database, PnP verification and relocation.
"""

import cv2
import numpy as np
import pytest

from odometry.backend import BackendSettings, WindowState, manage_landmarks
from odometry.errors import EmptyKeyframe, VocabularyFormatError
from odometry.frontend import StereoFrameFeatures
from odometry.geometry import Rotation, Transform
from odometry.loop_closure import (
    VOCABULARY_MAGIC,
    BriefExtractor,
    KeyframeDatabase,
    LoopCandidate,
    LoopCloser,
    LoopReprojectionBatch,
    LoopSettings,
    Vocabulary,
    apply_rigid_correction,
    correct_map_points,
    describe_and_index,
    hamming,
    load_vocabulary,
    match_descriptors,
    query_candidates,
    relocation_optimize,
    save_vocabulary,
    synthetic_descriptors,
    train_vocabulary,
    verify_candidate,
)
from odometry.optimizer import Manifold, ParameterBlock, check_jacobian

MAP_FRAMES = tuple(range(0, 32, 4))


def camera_pose(bundle, k):
    return bundle.states[k].pose * bundle.rig.T_body_left


def indexed_database(bundle, frames=MAP_FRAMES):
    database = KeyframeDatabase()
    for seq, k in enumerate(frames):
        describe_and_index(database, k, seq, bundle.frames[k], camera_pose(bundle, k), bundle.rig)
    database.set_vocabulary(train_vocabulary([r.descriptors for r in database], k=8, levels=2))
    return database


def clustered_descriptors(rng, clusters=3, members=20, flips=8):
    centers = rng.integers(0, 2, size=(clusters, 256)).astype(np.uint8)
    sets = []
    for center in centers:
        bits = np.repeat(center[None], members, axis=0)
        for row in bits:
            row[rng.choice(256, flips, replace=False)] ^= 1
        sets.append(np.packbits(bits, axis=1))
    return sets


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------

def test_hamming_counts_differing_bits():
    a = np.zeros((1, 32), dtype=np.uint8)
    b = a.copy()
    b[0, 0] = 0b1011
    b[0, 31] = 0xFF
    assert hamming(a, b)[0, 0] == 11
    assert hamming(b, b)[0, 0] == 0


def test_brief_follows_image_content():
    rng = np.random.default_rng(3)
    image = cv2.GaussianBlur(rng.integers(0, 256, (240, 320)).astype(np.uint8), (0, 0), 1.5)
    moved = np.roll(np.roll(image, 3, axis=0), 5, axis=1)
    pixels = np.array([[100.0, 100.0], [200.0, 120.0], [150.0, 60.0]])
    extractor = BriefExtractor(seed=7)
    d0, valid0 = extractor.compute(image, pixels)
    d1, valid1 = extractor.compute(moved, pixels + [5.0, 3.0])
    assert valid0.all() and valid1.all()
    assert d0.shape == (3, 32)
    assert np.array_equal(d0, d1)
    assert hamming(d0[:1], d0[1:2])[0, 0] > 40


def test_brief_marks_border_features_invalid():
    image = np.zeros((100, 100), dtype=np.uint8)
    _, valid = BriefExtractor().compute(image, [[5.0, 50.0], [50.0, 50.0], [50.0, 98.0]])
    assert valid.tolist() == [False, True, False]


def test_synthetic_descriptors_are_stable_per_feature():
    a = synthetic_descriptors([1, 2, 3], seed=4)
    b = synthetic_descriptors([3, 1], seed=4)
    assert np.array_equal(a[0], b[1])
    assert np.array_equal(a[2], b[0])
    assert not np.array_equal(a[0], a[1])
    assert not np.array_equal(a, synthetic_descriptors([1, 2, 3], seed=5))


def test_match_descriptors_is_mutual():
    a = synthetic_descriptors([1, 2, 3])
    b = synthetic_descriptors([9, 3, 1])
    assert sorted(match_descriptors(a, b)) == [(0, 2), (2, 1)]
    assert match_descriptors(a, b[:0]) == []


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def test_vocabulary_separates_clusters(rng):
    sets = clustered_descriptors(rng)
    vocabulary = train_vocabulary(sets, k=3, levels=1)
    assert len(vocabulary.words) == 3
    words = [set(vocabulary.transform(d).tolist()) for d in sets]
    assert all(len(w) == 1 for w in words)
    assert len(set.union(*words)) == 3


def test_bow_is_normalized_and_scored(rng):
    sets = clustered_descriptors(rng)
    vocabulary = train_vocabulary(sets, k=3, levels=1)
    a = vocabulary.bow(sets[0])
    mixed = vocabulary.bow(np.concatenate([sets[0], sets[1]]))
    assert sum(a.values()) == pytest.approx(1.0)
    assert Vocabulary.score(a, a) == pytest.approx(1.0)
    assert Vocabulary.score(a, vocabulary.bow(sets[2])) == pytest.approx(0.0)
    assert 0.0 < Vocabulary.score(a, mixed) < 1.0
    assert Vocabulary.score({}, a) == 0.0


def test_training_needs_descriptors():
    with pytest.raises(ValueError):
        train_vocabulary([np.zeros((0, 32), dtype=np.uint8)])


def test_vocabulary_file_round_trip(tmp_path, rng):
    vocabulary = train_vocabulary(clustered_descriptors(rng), k=3, levels=2)
    path = tmp_path / "voc" / "tree.bin"
    save_vocabulary(vocabulary, path)
    assert path.read_bytes().startswith(VOCABULARY_MAGIC)
    loaded = load_vocabulary(path)
    assert (loaded.k, loaded.levels, loaded.bits) == (3, 2, 256)
    for name in ("parent", "weight", "descriptor"):
        assert np.array_equal(loaded.nodes[name], vocabulary.nodes[name])
    probe = clustered_descriptors(np.random.default_rng(9))[0]
    assert np.array_equal(loaded.transform(probe), vocabulary.transform(probe))


def test_load_rejects_foreign_and_truncated_files(tmp_path, rng):
    vocabulary = train_vocabulary(clustered_descriptors(rng), k=3, levels=1)
    path = tmp_path / "tree.bin"
    save_vocabulary(vocabulary, path)
    data = path.read_bytes()

    (tmp_path / "short.bin").write_bytes(data[:5])
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXX" + data[7:])
    (tmp_path / "cut.bin").write_bytes(data[:-3])
    for name in ("short.bin", "magic.bin", "cut.bin"):
        with pytest.raises(VocabularyFormatError):
            load_vocabulary(tmp_path / name)


# ---------------------------------------------------------------------------
# database / verification
# ---------------------------------------------------------------------------

def test_describe_keeps_stereo_features_only(figure8_bundle):
    database = KeyframeDatabase()
    frame = figure8_bundle.frames[0]
    record = describe_and_index(database, 0, 0, frame, camera_pose(figure8_bundle, 0), figure8_bundle.rig)
    stereo_ids = {o.feature_id for o in frame.stereo}
    assert 0 < len(record) <= len(stereo_ids)
    assert set(record.feature_ids.tolist()) <= stereo_ids
    # simulator ids are scene point indices
    assert np.allclose(record.points_w, figure8_bundle.scene[record.feature_ids], atol=1e-3)
    assert record.bow is None
    assert len(database) == 1


def test_describe_rejects_keyframe_without_stereo(figure8_bundle):
    with pytest.raises(EmptyKeyframe):
        describe_and_index(KeyframeDatabase(), 0, 0, StereoFrameFeatures(0, 0.0, []),
                           Transform.identity(), figure8_bundle.rig)


def test_revisit_is_found_and_verified(figure8_bundle):
    database = indexed_database(figure8_bundle)
    record = describe_and_index(database, 1000, 40, figure8_bundle.frames[10], Transform.identity(),
                                figure8_bundle.rig)
    candidates = query_candidates(record, database)
    assert candidates
    assert abs(candidates[0].record.keyframe_id - 10) <= 6
    assert all(a.score >= b.score for a, b in zip(candidates, candidates[1:]))

    match = verify_candidate(record, candidates[0], figure8_bundle.rig.left.focal)
    assert match is not None
    assert match.current_id == 1000
    dt, dr = match.T_w_c.distance_to(camera_pose(figure8_bundle, 10))
    assert dt < 1e-2
    assert dr < 0.1
    assert len(match.loop_points_cam) == len(match.pairs) == len(match.current_bearings)
    assert match.relative.distance_to(
        camera_pose(figure8_bundle, match.loop_id).inverse() * camera_pose(figure8_bundle, 10))[0] < 1e-2


def test_temporal_gap_filters_recent_keyframes(figure8_bundle):
    database = indexed_database(figure8_bundle)
    record = describe_and_index(database, 1000, len(MAP_FRAMES), figure8_bundle.frames[10],
                                Transform.identity(), figure8_bundle.rig)
    assert query_candidates(record, database, min_gap_keyframes=30) == []


def test_query_without_vocabulary_is_empty(figure8_bundle):
    database = KeyframeDatabase()
    record = describe_and_index(database, 0, 100, figure8_bundle.frames[0], Transform.identity(),
                                figure8_bundle.rig)
    assert query_candidates(record, database, min_gap_keyframes=0) == []


def test_verification_needs_enough_pairs(figure8_bundle):
    database = indexed_database(figure8_bundle)
    record = describe_and_index(database, 1000, 40, figure8_bundle.frames[10], Transform.identity(),
                                figure8_bundle.rig)
    best = query_candidates(record, database)[0]
    few = LoopCandidate(best.record, best.score, best.pairs[:10])
    assert verify_candidate(record, few, figure8_bundle.rig.left.focal) is None


# ---------------------------------------------------------------------------
# relocation
# ---------------------------------------------------------------------------

def test_loop_reprojection_jacobians(rng):
    def rotation_block(name, scale):
        return ParameterBlock(name, Rotation.exp(rng.normal(scale=scale, size=3)).q, Manifold.ROTATION)

    blocks = [
        ParameterBlock("pj", rng.normal(scale=0.3, size=3)), rotation_block("qj", 0.1),
        ParameterBlock("pv", rng.normal(scale=0.3, size=3)), rotation_block("qv", 0.1),
        ParameterBlock("t", rng.normal(scale=0.05, size=3)), rotation_block("qbc", 0.05),
    ]
    n = 4
    points = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(4, 6, n)])
    observed = rng.normal(size=(n, 3))
    observed /= np.linalg.norm(observed, axis=1, keepdims=True)
    slots = [[b.block_id] * n for b in blocks]
    batch = LoopReprojectionBatch(slots, points, observed, 300.0)
    assert check_jacobian(batch, blocks) < 1e-4


def test_correct_map_points_composes_transforms():
    points = np.array([[0.0, 0.0, 2.0], [1.0, -1.0, 4.0]])
    assert np.allclose(correct_map_points(Transform.identity(), Transform.identity(), points), points)
    T = Transform(Rotation.exp([0.0, 0.3, 0.0]), [1.0, 0.0, 0.0])
    assert np.allclose(correct_map_points(T.inverse(), T, points), points)
    assert correct_map_points(T, T, np.zeros((0, 3))).shape == (0, 3)


def window_from_truth(bundle, keyframes):
    window = WindowState(bundle.rig, use_imu=False)
    for k in keyframes:
        window.add_keyframe(k, bundle.states[k].copy(), bundle.frames[k])
        manage_landmarks(window)
    return window


def test_rigid_correction_moves_states(figure8_bundle):
    window = window_from_truth(figure8_bundle, (20, 24))
    T = Transform(Rotation.exp([0.0, 0.0, 0.5]), [1.0, 2.0, 0.0])
    before = {k: s.copy() for k, s in window.states.items()}
    apply_rigid_correction(window, T)
    for k in window.keyframe_ids:
        assert window.states[k].pose.distance_to(T * before[k].pose)[0] < 1e-12
        assert np.allclose(window.states[k].velocity, T.rotation.apply(before[k].velocity))


def test_relocation_removes_drift(figure8_bundle):
    keyframes = (20, 24, 28, 32)
    window = window_from_truth(figure8_bundle, keyframes)
    drift = Transform(Rotation.exp([0.0, 0.0, 0.08]), [0.4, -0.3, 0.05])
    apply_rigid_correction(window, drift)

    database = indexed_database(figure8_bundle)
    record = describe_and_index(database, 32, 40, figure8_bundle.frames[32], window.camera_pose(32),
                                figure8_bundle.rig)
    match = next(m for m in (verify_candidate(record, c, figure8_bundle.rig.left.focal)
                             for c in query_candidates(record, database)) if m is not None)

    relocated = relocation_optimize(window, match, BackendSettings(deterministic=True))
    assert relocated.prior is None
    for k in keyframes:
        dt, dr = relocated.states[k].pose.distance_to(figure8_bundle.states[k].pose)
        assert dt < 0.02
        assert dr < 0.2
    # the input window keeps its drift
    assert window.states[32].pose.distance_to(figure8_bundle.states[32].pose)[0] > 0.3


# ---------------------------------------------------------------------------
# detection lifecycle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("deterministic", [True, False])
def test_loop_closer_trains_and_detects(figure8_bundle, deterministic):
    settings = LoopSettings(training_keyframes=5, min_gap_keyframes=3, vocabulary_k=8, vocabulary_levels=2,
                            deterministic=deterministic)
    closer = LoopCloser(figure8_bundle.rig, settings)
    try:
        for k in range(0, 44, 4):
            closer.add_keyframe(k, figure8_bundle.frames[k], camera_pose(figure8_bundle, k))
        assert closer.database.vocabulary is not None
        closer.poll(wait=True)
        assert closer.add_keyframe(999, figure8_bundle.frames[10], Transform.identity()) is not None
        matches = closer.poll(wait=True)
    finally:
        closer.close()
    assert len(matches) == 1
    assert matches[0].current_id == 999
    assert matches[0].T_w_c.distance_to(camera_pose(figure8_bundle, 10))[0] < 1e-2


def test_loop_closer_skips_empty_keyframe(figure8_bundle):
    closer = LoopCloser(figure8_bundle.rig, LoopSettings(deterministic=True))
    assert closer.add_keyframe(0, StereoFrameFeatures(0, 0.0, []), Transform.identity()) is None
    assert closer.poll() == []
    assert len(closer.database) == 0


def test_loop_closer_loads_vocabulary_file(tmp_path, rng, figure8_bundle):
    path = tmp_path / "tree.bin"
    save_vocabulary(train_vocabulary(clustered_descriptors(rng), k=3, levels=1), path)
    closer = LoopCloser(figure8_bundle.rig, LoopSettings(vocabulary_path=str(path), deterministic=True))
    assert closer.database.vocabulary is not None
    assert closer.database.vocabulary.k == 3
