"""
Stereo-Inertial Odometry - Trajectories

TUM trajectory files, timestamp association and the absolute trajectory
error (ATE) with optional rigid (Umeyama) alignment.

TUM line: ``timestamp tx ty tz qx qy qz qw``.

License: MIT
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from odometry.errors import MalformedCsv, NoAssociations
from odometry.geometry import Rotation, Transform

logger = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE_S = 0.01
TUM_HEADER = "# timestamp tx ty tz qx qy qz qw"


@dataclass
class TrajectoryEstimate:
    """Poses in time order, each tagged with the tracking mode that produced it."""

    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    modes: list = field(default_factory=list)

    def __len__(self):
        return len(self.timestamps)

    def append(self, timestamp, pose, mode=None):
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise ValueError(f"trajectory timestamps must increase ({timestamp} after {self.timestamps[-1]})")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)
        self.modes.append(mode)

    def positions(self):
        return np.array([T.translation for T in self.poses]).reshape(-1, 3)

    def transformed(self, T_new_old, start=0):
        """Copy with ``T_new_old`` applied to the poses from index ``start`` on."""
        poses = list(self.poses[:start]) + [T_new_old * T for T in self.poses[start:]]
        return TrajectoryEstimate(list(self.timestamps), poses, list(self.modes))

    @classmethod
    def from_pairs(cls, pairs):
        traj = cls()
        for t, pose in pairs:
            traj.append(t, pose)
        return traj


def _fmt(value):
    return f"{float(value) + 0.0:.9g}"


def format_pose(timestamp, pose):
    q = pose.rotation.q
    values = (*pose.translation, q[1], q[2], q[3], q[0])
    return f"{timestamp:.8f} " + " ".join(_fmt(v) for v in values)


def write_trajectory(trajectory, path):
    """Write a TUM file with a comment header; an empty trajectory writes only the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [TUM_HEADER] + [format_pose(t, T) for t, T in zip(trajectory.timestamps, trajectory.poses)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectory(path):
    """
    Parse a TUM trajectory file.

    Raises:
        MalformedCsv: a line without 8 numeric fields (1-based line and column)
        FileNotFoundError: missing file
    """
    path = Path(path)
    traj = TrajectoryEstimate()
    with open(path, encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.replace(",", " ").split()
            if len(fields) != 8:
                raise MalformedCsv(path, number, min(len(fields), 8) + 1, f"expected 8 fields, found {len(fields)}")
            values = []
            for column, item in enumerate(fields, start=1):
                try:
                    values.append(float(item))
                except ValueError:
                    raise MalformedCsv(path, number, column, f"cannot parse {item!r}") from None
            if not np.all(np.isfinite(values)):
                raise MalformedCsv(path, number, int(np.argmin(np.isfinite(values))) + 1, "non-finite value")
            t, tx, ty, tz, qx, qy, qz, qw = values
            if traj.timestamps and t <= traj.timestamps[-1]:
                raise MalformedCsv(path, number, 1, "timestamps must increase")
            traj.append(t, Transform(Rotation([qw, qx, qy, qz]), [tx, ty, tz]))
    return traj


def associate(stamps_a, stamps_b, max_difference=ASSOCIATION_TOLERANCE_S):
    """
    One-to-one nearest-timestamp pairs (i, j) with |a_i - b_j| <= max_difference.
    """
    a = np.asarray(stamps_a, dtype=float)
    b = np.asarray(stamps_b, dtype=float)
    if not len(a) or not len(b):
        return []
    candidates = []
    for i, t in enumerate(a):
        k = int(np.searchsorted(b, t))
        for j in (k - 1, k):
            if 0 <= j < len(b) and abs(b[j] - t) <= max_difference:
                candidates.append((abs(b[j] - t), i, j))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def umeyama_alignment(source, target):
    """
    Rigid transform T minimizing sum |target - T(source)|^2.

    Args:
        source: (n, 3) points
        target: (n, 3) points

    Returns:
        Transform
    """
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    sigma = (target - mu_t).T @ (source - mu_s) / len(source)
    U, _, Vt = np.linalg.svd(sigma)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Transform(Rotation.from_matrix(R), mu_t - R @ mu_s)


def ate_residuals(estimate, groundtruth, align=None, max_difference=ASSOCIATION_TOLERANCE_S):
    """
    Translational errors of the associated pose pairs.

    Args:
        estimate (TrajectoryEstimate): estimated trajectory
        groundtruth (TrajectoryEstimate): reference trajectory
        align: None or "SE3" (True is accepted for "SE3")

    Returns:
        np.ndarray: (n, 3) errors, ground truth minus (aligned) estimate

    Raises:
        NoAssociations: fewer than 2 pairs within ``max_difference``
    """
    pairs = associate(estimate.timestamps, groundtruth.timestamps, max_difference)
    if len(pairs) < 2:
        raise NoAssociations(f"only {len(pairs)} pose pairs within {max_difference * 1e3:.0f} ms")
    est = estimate.positions()[[i for i, _ in pairs]]
    ref = groundtruth.positions()[[j for _, j in pairs]]
    if align in (True, "SE3", "se3"):
        est = umeyama_alignment(est, ref).apply(est)
    elif align not in (None, False):
        raise ValueError(f"unknown alignment {align!r}")
    return ref - est


def compute_ate(estimate, groundtruth, align=None, max_difference=ASSOCIATION_TOLERANCE_S):
    """ATE RMSE in metres."""
    errors = ate_residuals(estimate, groundtruth, align, max_difference)
    rmse = float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1))))
    logger.debug("ATE over %d pairs (align=%s): %.6f m", len(errors), align, rmse)
    return rmse
