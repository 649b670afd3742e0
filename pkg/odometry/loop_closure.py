"""
Stereo-Inertial Odometry - Loop Closure

Place recognition over stereo (3D) features with a bag of binary words,
geometric verification with PnP and relocation of the sliding window
against a fixed loop keyframe.

Pieces:
- BRIEF descriptors (256 bit) from images, or stable per-feature
  descriptors when the frames come from the simulator
- vocabulary tree trained by k-medians, TF-IDF weighting, L1 scoring,
  stored in the ``UMSVOC1`` binary format
- keyframe database with a temporal gap filter
- relocation solve with Huber-robustified loop reprojection rows

License: MIT
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from odometry.backend import (
    STEREO_MIN_PARALLAX_DEG,
    BackendSettings,
    VisualFactorKind,
    build_blocks,
    build_factors,
    commit_blocks,
    solve_window,
)
from odometry.errors import EmptyKeyframe, GeometryError, VocabularyFormatError
from odometry.geometry import Transform, pnp_ransac, quat_to_matrix_batch, skew_batch, triangulate
from odometry.optimizer import FactorBatch, HuberLoss, Manifold, ParameterBlock, solve

logger = logging.getLogger(__name__)

DESCRIPTOR_BITS = 256
VOCABULARY_MAGIC = b"UMSVOC1"

_HEADER_DTYPE = np.dtype([
    ("magic", "S7"),
    ("k", "<u4"),
    ("levels", "<u4"),
    ("bits", "<u4"),
    ("nodes", "<u4"),
])


def _node_dtype(bits):
    return np.dtype([
        ("parent", "<i4"),
        ("weight", "<f8"),
        ("descriptor", "u1", (bits // 8,)),
    ])


@dataclass(frozen=True)
class LoopSettings:
    enabled: bool = True
    vocabulary_path: str = ""
    vocabulary_k: int = 10
    vocabulary_levels: int = 3
    training_keyframes: int = 20
    min_pairs: int = 25
    min_inliers: int = 15
    min_gap_keyframes: int = 30
    match_distance_bits: int = 64
    max_candidates: int = 5
    pnp_threshold_px: float = 2.0
    pnp_confidence: float = 0.99
    pnp_max_iterations: int = 200
    seed: int = 0
    deterministic: bool = False

    @classmethod
    def from_config(cls, cfg):
        return cls(
            enabled=cfg["loop.enabled"],
            vocabulary_path=cfg["loop.vocabulary_path"],
            vocabulary_k=cfg["loop.vocabulary_k"],
            vocabulary_levels=cfg["loop.vocabulary_levels"],
            training_keyframes=cfg["loop.training_keyframes"],
            min_pairs=cfg["loop.min_pairs"],
            min_inliers=cfg["loop.min_inliers"],
            min_gap_keyframes=cfg["loop.min_gap_keyframes"],
            match_distance_bits=cfg["loop.match_distance_bits"],
            max_candidates=cfg["loop.max_candidates"],
            pnp_threshold_px=cfg["geometry.pnp_threshold_px"],
            pnp_confidence=cfg["geometry.pnp_confidence"],
            pnp_max_iterations=cfg["geometry.pnp_max_iterations"],
            seed=cfg["run.seed"],
            deterministic=cfg["run.deterministic"],
        )


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------

def hamming(a, b):
    """Pairwise Hamming distances between packed descriptor sets (n, m)."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1, a.shape[-1])
    b = np.asarray(b, dtype=np.uint8).reshape(-1, b.shape[-1])
    return np.unpackbits(a[:, None, :] ^ b[None, :, :], axis=-1).sum(axis=-1)


class BriefExtractor:
    """
    Unoriented BRIEF: 256 intensity comparisons inside a smoothed patch.

    The comparison pattern is drawn once from ``seed``, so descriptors are a
    pure function of the image, the pixel and the seed.
    """

    def __init__(self, patch_size=31, seed=0, bits=DESCRIPTOR_BITS):
        self.patch_size = patch_size
        self.bits = bits
        half = patch_size // 2
        rng = np.random.default_rng(seed)
        pattern = np.rint(rng.normal(0.0, patch_size / 5.0, size=(bits, 4)))
        self.pattern = np.clip(pattern, -half, half).astype(int)

    def compute(self, image, pixels):
        """
        Args:
            image: grayscale image
            pixels: (n, 2) feature positions

        Returns:
            tuple: (descriptors (n, bits/8) uint8, valid mask); features
                closer to the border than half a patch are invalid
        """
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        smooth = cv2.GaussianBlur(np.asarray(image, dtype=np.uint8), (9, 9), 2.0)
        h, w = smooth.shape[:2]
        half = self.patch_size // 2 + 1
        centers = np.rint(pixels).astype(int)
        valid = ((centers[:, 0] >= half) & (centers[:, 0] < w - half)
                 & (centers[:, 1] >= half) & (centers[:, 1] < h - half))
        c = np.clip(centers, half, [w - half - 1, h - half - 1])
        x1 = c[:, 0, None] + self.pattern[None, :, 0]
        y1 = c[:, 1, None] + self.pattern[None, :, 1]
        x2 = c[:, 0, None] + self.pattern[None, :, 2]
        y2 = c[:, 1, None] + self.pattern[None, :, 3]
        bits = (smooth[y1, x1] < smooth[y2, x2]).astype(np.uint8)
        return np.packbits(bits, axis=1), valid


def synthetic_descriptors(feature_ids, seed=0, bits=DESCRIPTOR_BITS):
    """
    Descriptors for simulator features: each feature id maps to a fixed
    random bit string, so revisits of the same scene point match exactly.
    """
    out = np.zeros((len(feature_ids), bits // 8), dtype=np.uint8)
    for row, fid in enumerate(feature_ids):
        out[row] = np.random.default_rng([seed, int(fid)]).integers(0, 256, bits // 8, dtype=np.uint8)
    return out


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def _kmedians(bits, k, rng, iterations=10):
    """Cluster unpacked binary descriptors; centers are per-bit majorities."""
    n = len(bits)
    if n <= k:
        return bits.copy(), np.arange(n)
    centers = [bits[rng.integers(n)]]
    dist = (bits != centers[0]).sum(axis=1).astype(float)
    while len(centers) < k:
        weights = dist ** 2
        if weights.sum() == 0:
            break
        pick = bits[rng.choice(n, p=weights / weights.sum())]
        centers.append(pick)
        dist = np.minimum(dist, (bits != pick).sum(axis=1))
    centers = np.array(centers, dtype=np.uint8)
    for _ in range(iterations):
        labels = (bits[:, None, :] != centers[None, :, :]).sum(axis=2).argmin(axis=1)
        updated = centers.copy()
        for c in range(len(centers)):
            members = bits[labels == c]
            if len(members):
                updated[c] = (members.mean(axis=0) > 0.5).astype(np.uint8)
        if np.array_equal(updated, centers):
            break
        centers = updated
    labels = (bits[:, None, :] != centers[None, :, :]).sum(axis=2).argmin(axis=1)
    return centers, labels


class Vocabulary:
    """
    Vocabulary tree with ``k`` branches and ``levels`` levels.

    Node 0 is the root; every other node stores its parent, its center
    descriptor and, for leaves (words), the IDF weight.
    """

    def __init__(self, k, levels, nodes, bits=DESCRIPTOR_BITS):
        self.k = k
        self.levels = levels
        self.bits = bits
        self.nodes = nodes
        self._children = {}
        for index in range(1, len(nodes)):
            self._children.setdefault(int(nodes["parent"][index]), []).append(index)
        self._children = {p: np.array(c) for p, c in self._children.items()}

    def __len__(self):
        return len(self.nodes)

    @property
    def words(self):
        return [i for i in range(1, len(self.nodes)) if i not in self._children]

    def transform(self, descriptors):
        """Leaf word id of every descriptor."""
        descriptors = np.asarray(descriptors, dtype=np.uint8).reshape(-1, self.bits // 8)
        words = np.zeros(len(descriptors), dtype=int)
        for row, d in enumerate(descriptors):
            node = 0
            while node in self._children:
                children = self._children[node]
                node = int(children[hamming(d[None], self.nodes["descriptor"][children])[0].argmin()])
            words[row] = node
        return words

    def bow(self, descriptors):
        """L1-normalized TF-IDF vector as a {word: weight} mapping."""
        words = self.transform(descriptors)
        if not len(words):
            return {}
        ids, counts = np.unique(words, return_counts=True)
        values = counts / len(words) * self.nodes["weight"][ids]
        norm = np.abs(values).sum()
        if norm <= 0:
            return {}
        return {int(w): float(v / norm) for w, v in zip(ids, values)}

    @staticmethod
    def score(a, b):
        """L1 similarity in [0, 1] of two normalized BoW vectors."""
        if not a or not b:
            return 0.0
        keys = set(a) | set(b)
        return 1.0 - 0.5 * sum(abs(a.get(w, 0.0) - b.get(w, 0.0)) for w in keys)


def train_vocabulary(descriptor_sets, k=10, levels=3, seed=0, iterations=10):
    """
    Build a vocabulary from per-keyframe descriptor arrays.

    Args:
        descriptor_sets (list): packed descriptors (n_i, 32), one array per
            keyframe; the keyframes are the documents for IDF weighting
        k (int): branching factor
        levels (int): tree depth
        seed (int): seeds the center initialization

    Returns:
        Vocabulary
    """
    sets = [np.asarray(d, dtype=np.uint8).reshape(-1, DESCRIPTOR_BITS // 8) for d in descriptor_sets]
    packed = np.concatenate(sets) if sets else np.zeros((0, DESCRIPTOR_BITS // 8), dtype=np.uint8)
    if not len(packed):
        raise ValueError("vocabulary training needs at least one descriptor")
    bits = np.unpackbits(packed, axis=1)
    rng = np.random.default_rng(seed)
    dtype = _node_dtype(DESCRIPTOR_BITS)
    rows = [(-1, 0.0, np.zeros(DESCRIPTOR_BITS // 8, dtype=np.uint8))]
    queue = [(0, 0, np.arange(len(bits)))]
    while queue:
        parent, level, members = queue.pop(0)
        if level >= levels or len(members) <= 1:
            continue
        centers, labels = _kmedians(bits[members], k, rng, iterations)
        for c, center in enumerate(centers):
            rows.append((parent, 0.0, np.packbits(center)))
            queue.append((len(rows) - 1, level + 1, members[labels == c]))
    nodes = np.array(rows, dtype=dtype)
    vocabulary = Vocabulary(k, levels, nodes)

    documents = len(sets)
    containing = {}
    for d in sets:
        for word in set(vocabulary.transform(d).tolist()):
            containing[word] = containing.get(word, 0) + 1
    for word in vocabulary.words:
        nodes["weight"][word] = np.log(documents / containing.get(word, 1)) if documents > 1 else 1.0
    logger.info("trained vocabulary: %d nodes, %d words from %d descriptors",
                len(nodes), len(vocabulary.words), len(packed))
    return vocabulary


def save_vocabulary(vocabulary, path):
    """Write ``UMSVOC1``: little-endian header then the node table."""
    header = np.array([(VOCABULARY_MAGIC, vocabulary.k, vocabulary.levels, vocabulary.bits,
                        len(vocabulary.nodes))], dtype=_HEADER_DTYPE)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.tobytes() + vocabulary.nodes.astype(_node_dtype(vocabulary.bits)).tobytes())


def load_vocabulary(path):
    """
    Raises:
        VocabularyFormatError: wrong magic, header or truncated node table
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER_DTYPE.itemsize:
        raise VocabularyFormatError(f"{path}: truncated vocabulary header")
    header = np.frombuffer(data, dtype=_HEADER_DTYPE, count=1)[0]
    if bytes(header["magic"]) != VOCABULARY_MAGIC:
        raise VocabularyFormatError(f"{path}: not a UMSVOC1 vocabulary")
    bits = int(header["bits"])
    if bits <= 0 or bits % 8:
        raise VocabularyFormatError(f"{path}: invalid descriptor size {bits}")
    dtype = _node_dtype(bits)
    count = int(header["nodes"])
    if len(data) != _HEADER_DTYPE.itemsize + count * dtype.itemsize:
        raise VocabularyFormatError(f"{path}: node table size does not match {count} nodes")
    nodes = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER_DTYPE.itemsize).copy()
    return Vocabulary(int(header["k"]), int(header["levels"]), nodes, bits)


# ---------------------------------------------------------------------------
# keyframe database
# ---------------------------------------------------------------------------

@dataclass
class KeyframeRecord:
    """Stereo features of one keyframe as seen by place recognition."""

    keyframe_id: int
    sequence: int
    camera_pose: Transform
    feature_ids: np.ndarray
    descriptors: np.ndarray
    bearings: np.ndarray
    points_w: np.ndarray
    bow: dict = None

    def __len__(self):
        return len(self.feature_ids)


@dataclass
class LoopCandidate:
    record: KeyframeRecord
    score: float
    pairs: list


@dataclass
class LoopMatch:
    """
    Verified loop: ``pairs`` are (current feature index, loop feature index)
    geometric inliers; ``T_w_c`` is the current camera pose in the loop
    keyframe's map.
    """

    current_id: int
    loop_id: int
    pairs: list
    T_w_c: Transform
    loop_pose: Transform
    loop_points_cam: np.ndarray
    current_bearings: np.ndarray

    @property
    def relative(self):
        """T_loop_current."""
        return self.loop_pose.inverse() * self.T_w_c


class KeyframeDatabase:
    """Records in insertion order; BoW vectors filled once a vocabulary exists."""

    def __init__(self, vocabulary=None):
        self.vocabulary = vocabulary
        self.records = {}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records.values())

    def add(self, record):
        if self.vocabulary is not None and record.bow is None:
            record.bow = self.vocabulary.bow(record.descriptors)
        self.records[record.keyframe_id] = record

    def set_vocabulary(self, vocabulary):
        self.vocabulary = vocabulary
        for record in self.records.values():
            record.bow = vocabulary.bow(record.descriptors)


def describe_and_index(database, keyframe_id, sequence, features, camera_pose, rig,
                       image=None, extractor=None, seed=0):
    """
    Describe the stereo features of a keyframe and add it to the database.

    2D features are discarded. With an image the descriptors are BRIEF at
    the left pixels; without one they are the per-feature synthetic
    descriptors.

    Args:
        database (KeyframeDatabase): receives the record
        keyframe_id (int): keyframe id
        sequence (int): keyframe counter used by the temporal gap filter
        features (StereoFrameFeatures): observations of the keyframe
        camera_pose (Transform): T_w_c of the left camera
        rig (StereoRig): calibration
        image: left image or None
        extractor (BriefExtractor): pattern, default seeded with ``seed``

    Returns:
        KeyframeRecord

    Raises:
        EmptyKeyframe: no stereo feature could be described
    """
    stereo = list(features.stereo)
    if not stereo:
        raise EmptyKeyframe(f"keyframe {keyframe_id} has no stereo features")
    keep, points = [], []
    for obs in stereo:
        try:
            point_l, _ = triangulate(Transform.identity(), rig.T_left_right, obs.left_bearing, obs.right_bearing,
                                     STEREO_MIN_PARALLAX_DEG)
        except GeometryError:
            continue
        keep.append(obs)
        points.append(camera_pose.apply(point_l))
    ids = np.array([o.feature_id for o in keep], dtype=int)
    if image is not None:
        extractor = extractor or BriefExtractor(seed=seed)
        descriptors, valid = extractor.compute(image, np.array([o.left for o in keep]).reshape(-1, 2))
    else:
        descriptors, valid = synthetic_descriptors(ids, seed), np.ones(len(keep), dtype=bool)
    if not valid.any():
        raise EmptyKeyframe(f"keyframe {keyframe_id} has no describable stereo features")
    record = KeyframeRecord(
        keyframe_id, sequence, camera_pose, ids[valid], descriptors[valid],
        np.array([o.left_bearing for o in keep]).reshape(-1, 3)[valid],
        np.array(points).reshape(-1, 3)[valid],
    )
    database.add(record)
    return record


def match_descriptors(a, b, max_distance=64):
    """Mutual nearest neighbours within ``max_distance`` bits as (i, j) pairs."""
    if not len(a) or not len(b):
        return []
    d = hamming(a, b)
    forward = d.argmin(axis=1)
    backward = d.argmin(axis=0)
    return [(i, int(j)) for i, j in enumerate(forward)
            if backward[j] == i and d[i, j] <= max_distance]


def query_candidates(record, database, min_gap_keyframes=30, min_pairs=25, max_distance=64, max_candidates=5):
    """
    Loop candidates for ``record``, best BoW score first.

    Keyframes closer than ``min_gap_keyframes`` in sequence are never
    returned; a candidate must share ``min_pairs`` descriptor matches.
    """
    if database.vocabulary is None or record.bow is None:
        return []
    scored = []
    for other in database:
        if other.keyframe_id == record.keyframe_id or record.sequence - other.sequence < min_gap_keyframes:
            continue
        score = Vocabulary.score(record.bow, other.bow)
        if score > 0:
            scored.append((score, other))
    scored.sort(key=lambda item: (-item[0], item[1].keyframe_id))
    candidates = []
    for score, other in scored[:max_candidates]:
        pairs = match_descriptors(record.descriptors, other.descriptors, max_distance)
        if len(pairs) >= min_pairs:
            candidates.append(LoopCandidate(other, score, pairs))
    return candidates


def verify_candidate(record, candidate, focal_px, settings=LoopSettings()):
    """
    PnP of the candidate's map points against the current bearings.

    Returns:
        LoopMatch, or None when fewer than ``min_inliers`` pairs agree
    """
    pairs = candidate.pairs
    if len(pairs) < max(6, settings.min_inliers):
        return None
    cur = np.array([i for i, _ in pairs])
    old = np.array([j for _, j in pairs])
    try:
        T_w_c, mask = pnp_ransac(candidate.record.points_w[old], record.bearings[cur], focal_px=focal_px,
                                 threshold_px=settings.pnp_threshold_px, confidence=settings.pnp_confidence,
                                 max_iterations=settings.pnp_max_iterations, min_inlier_ratio=0.0,
                                 seed=settings.seed)
    except GeometryError as exc:
        logger.debug("loop %d -> %d rejected: %s", record.keyframe_id, candidate.record.keyframe_id, exc)
        return None
    if mask.sum() < settings.min_inliers:
        logger.debug("loop %d -> %d rejected: %d inliers", record.keyframe_id,
                     candidate.record.keyframe_id, int(mask.sum()))
        return None
    inliers = [p for p, ok in zip(pairs, mask) if ok]
    loop_pose = candidate.record.camera_pose
    points_cam = loop_pose.inverse().apply(candidate.record.points_w[[j for _, j in inliers]])
    return LoopMatch(record.keyframe_id, candidate.record.keyframe_id, inliers, T_w_c, loop_pose,
                     points_cam, record.bearings[[i for i, _ in inliers]])


# ---------------------------------------------------------------------------
# relocation
# ---------------------------------------------------------------------------

class LoopReprojectionBatch(FactorBatch):
    """
    Bearing residuals of loop keyframe points seen from a window keyframe.

    Slots: p_current, q_current, p_loop, q_loop, t_bc, q_bc. Each row holds
    the point in the loop keyframe's left camera and the current bearing.
    """

    def __init__(self, slot_ids, points_loop, observed, weight, loss=None):
        super().__init__(slot_ids, loss)
        self.points_loop = np.asarray(points_loop, dtype=float).reshape(-1, 3)
        self.observed = np.asarray(observed, dtype=float).reshape(-1, 3)
        self.weight = np.broadcast_to(np.asarray(weight, dtype=float), (len(self.observed),)).copy()

    def evaluate(self, values, jacobians=True):
        p_j, q_j, p_v, q_v, t_bc, q_bc = values
        R_j = quat_to_matrix_batch(q_j)
        R_v = quat_to_matrix_batch(q_v)
        R_bc = quat_to_matrix_batch(q_bc)

        P_bv = np.einsum("nij,nj->ni", R_bc, self.points_loop) + t_bc
        P_w = np.einsum("nij,nj->ni", R_v, P_bv) + p_v
        P_bj = np.einsum("nji,nj->ni", R_j, P_w - p_j)
        P_c = np.einsum("nji,nj->ni", R_bc, P_bj - t_bc)

        norm = np.linalg.norm(P_c, axis=1)
        active = (P_c[:, 2] > 0) & (norm > 1e-12)
        safe = np.where(active, norm, 1.0)
        unit = P_c / safe[:, None]
        residual = self.weight[:, None] * (self.observed - unit)
        residual[~active] = 0.0
        if not jacobians:
            return residual, None

        D = -(self.weight / safe)[:, None, None] * (np.eye(3)[None] - unit[:, :, None] * unit[:, None, :])
        D[~active] = 0.0
        DA = D @ np.swapaxes(R_bc, 1, 2)
        DM = DA @ np.swapaxes(R_j, 1, 2)
        DMRv = DM @ R_v
        return residual, [
            -DM,
            DA @ skew_batch(P_bj),
            DM,
            -DMRv @ skew_batch(P_bv),
            DMRv - DA,
            -DMRv @ R_bc @ skew_batch(self.points_loop) + D @ skew_batch(P_c),
        ]


def correct_map_points(T_cnew_w, T_w_cv, points_cam):
    """Move points from the loop camera frame into the corrected current camera."""
    points = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    if not len(points):
        return points
    return (T_cnew_w * T_w_cv).apply(points)


def apply_rigid_correction(window, T_new_old):
    """Move every keyframe state of the window by a rigid transform."""
    for kf_id in window.keyframe_ids:
        s = window.states[kf_id]
        pose = T_new_old * s.pose
        s.position = pose.translation
        s.rotation = pose.rotation
        s.velocity = T_new_old.rotation.apply(s.velocity)


def relocation_optimize(window, match, settings=BackendSettings(), kind=VisualFactorKind.STEREO_PLUS_LEFT_2D):
    """
    Re-optimize the window against a verified loop.

    The window is first moved rigidly so the current keyframe sits at the
    PnP pose, then solved with the loop rows added and the loop keyframe
    held fixed. The loop rows fix the gauge; the marginalization prior,
    expressed in the drifted frame, is dropped.

    Args:
        window (WindowState): contains ``match.current_id``
        match (LoopMatch): verified loop
        settings (BackendSettings): solver limits and pixel sigma
        kind (VisualFactorKind): visual factor set

    Returns:
        WindowState: a relocated copy; the input is untouched
    """
    window = window.copy()
    if not match.pairs:
        solve_window(window, kind, settings, max_iterations=settings.round2_max_iterations)
        return window

    current = window.camera_pose(match.current_id)
    apply_rigid_correction(window, match.T_w_c * current.inverse())
    window.prior = None

    blocks = build_blocks(window, settings, gauge=False)
    loop_body = match.loop_pose * window.T_body_left.inverse()
    v = match.loop_id
    blocks[("loop_p", v)] = ParameterBlock(("loop_p", v), loop_body.translation, constant=True)
    blocks[("loop_q", v)] = ParameterBlock(("loop_q", v), loop_body.rotation.q, Manifold.ROTATION, constant=True)
    j = match.current_id
    n = len(match.pairs)
    slots = [[("p", j)] * n, [("q", j)] * n, [("loop_p", v)] * n, [("loop_q", v)] * n,
             [("tbc",)] * n, [("qbc",)] * n]
    weight = window.rig.left.focal / settings.pixel_sigma
    loop_rows = LoopReprojectionBatch(slots, match.loop_points_cam, match.current_bearings, weight, HuberLoss(1.0))

    factors = build_factors(window, kind, settings) + [loop_rows]
    report = solve(blocks, factors, max_iterations=settings.max_iterations, tolerance=settings.tolerance,
                   initial_damping=settings.initial_damping)
    commit_blocks(window, blocks, settings)
    logger.info("relocated keyframe %d against loop keyframe %d: %d pairs, cost %.4g -> %.4g",
                j, v, n, report.initial_cost, report.final_cost)
    return window


# ---------------------------------------------------------------------------
# detection lifecycle
# ---------------------------------------------------------------------------

@dataclass
class LoopCloser:
    """
    Owns the vocabulary and database and runs detection per keyframe.

    Without a vocabulary file the first ``training_keyframes`` keyframes
    train one. Detection runs on a worker thread unless deterministic;
    ``poll`` returns finished matches at the next commit point.
    """

    rig: object
    settings: LoopSettings = field(default_factory=LoopSettings)
    database: KeyframeDatabase = field(default_factory=KeyframeDatabase)
    extractor: BriefExtractor = None
    _sequence: int = 0
    _pending: list = field(default_factory=list)
    _executor: ThreadPoolExecutor = None

    def __post_init__(self):
        if self.extractor is None:
            self.extractor = BriefExtractor(seed=self.settings.seed)
        if self.settings.vocabulary_path and self.database.vocabulary is None:
            self.database.set_vocabulary(load_vocabulary(self.settings.vocabulary_path))
        if not self.settings.deterministic:
            self._executor = ThreadPoolExecutor(max_workers=1)

    def _maybe_train(self):
        if self.database.vocabulary is not None or len(self.database) < self.settings.training_keyframes:
            return
        vocabulary = train_vocabulary([r.descriptors for r in self.database], self.settings.vocabulary_k,
                                      self.settings.vocabulary_levels, self.settings.seed)
        self.database.set_vocabulary(vocabulary)

    def _detect(self, record, database):
        candidates = query_candidates(record, database, self.settings.min_gap_keyframes,
                                      self.settings.min_pairs, self.settings.match_distance_bits,
                                      self.settings.max_candidates)
        for candidate in candidates:
            match = verify_candidate(record, candidate, self.rig.left.focal, self.settings)
            if match is not None:
                logger.info("loop detected: keyframe %d -> %d (%d inliers, score %.3f)",
                            match.current_id, match.loop_id, len(match.pairs), candidate.score)
                return match
        return None

    def add_keyframe(self, keyframe_id, features, camera_pose, image=None):
        """Index a keyframe and start detection; returns the record or None."""
        try:
            record = describe_and_index(self.database, keyframe_id, self._sequence, features, camera_pose,
                                        self.rig, image, self.extractor, self.settings.seed)
        except EmptyKeyframe as exc:
            logger.debug("%s", exc)
            return None
        finally:
            self._sequence += 1
        self._maybe_train()
        if self._executor is None:
            self._pending.append(self._detect(record, self.database))
        else:
            snapshot = KeyframeDatabase(self.database.vocabulary)
            snapshot.records = dict(self.database.records)
            self._pending.append(self._executor.submit(self._detect, record, snapshot))
        return record

    def poll(self, wait=False):
        """Matches whose detection has finished, oldest first."""
        done, waiting = [], []
        for item in self._pending:
            if hasattr(item, "result"):
                if wait or item.done():
                    done.append(item.result())
                else:
                    waiting.append(item)
            else:
                done.append(item)
        self._pending = waiting
        return [m for m in done if m is not None]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
