"""
Stereo-Inertial Odometry - Dataset I/O

Reads and writes sensor recordings in the EuRoC MAV "ASL" layout:

    mav0/cam0/data.csv + mav0/cam0/data/<ns>.png
    mav0/cam1/data.csv + mav0/cam1/data/<ns>.png
    mav0/imu0/data.csv
    mav0/state_groundtruth_estimate0/data.csv   (optional)

and cuts the streams into per-frame bundles: a stereo pair plus the IMU
samples since the previous frame.

License: MIT
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import pandas as pd

from odometry.errors import EmptyOverlap, MalformedCsv, MissingSensorDir, UnsortedTimestamps
from odometry.geometry import Rotation, Transform
from odometry.imu import ImuSample

logger = logging.getLogger(__name__)

STEREO_PAIR_TOLERANCE_NS = 1_000_000

CAMERA_COLUMNS = ["#timestamp [ns]", "filename"]
IMU_COLUMNS = [
    "#timestamp [ns]",
    "w_RS_S_x [rad s^-1]", "w_RS_S_y [rad s^-1]", "w_RS_S_z [rad s^-1]",
    "a_RS_S_x [m s^-2]", "a_RS_S_y [m s^-2]", "a_RS_S_z [m s^-2]",
]
GROUNDTRUTH_COLUMNS = [
    "#timestamp",
    "p_RS_R_x [m]", "p_RS_R_y [m]", "p_RS_R_z [m]",
    "q_RS_w []", "q_RS_x []", "q_RS_y []", "q_RS_z []",
    "v_RS_R_x [m s^-1]", "v_RS_R_y [m s^-1]", "v_RS_R_z [m s^-1]",
    "b_w_RS_S_x [rad s^-1]", "b_w_RS_S_y [rad s^-1]", "b_w_RS_S_z [rad s^-1]",
    "b_a_RS_S_x [m s^-2]", "b_a_RS_S_y [m s^-2]", "b_a_RS_S_z [m s^-2]",
]


def ns_to_seconds(ns):
    """Nanosecond timestamp to seconds, splitting off whole seconds first."""
    ns = int(ns)
    return ns // 1_000_000_000 + (ns % 1_000_000_000) * 1e-9


@dataclass(frozen=True)
class ImageRecord:
    timestamp_ns: int
    path: Path

    @property
    def timestamp(self):
        return ns_to_seconds(self.timestamp_ns)


@dataclass
class SensorStreams:
    """
    Parsed recording. ``imu_ns`` keeps the exact IMU timestamps next to the
    samples; ``groundtruth`` is a DataFrame (timestamp in seconds, position,
    quaternion w-first, velocity) or None.
    """

    root: Path
    left: list
    right: list
    imu: list
    imu_ns: np.ndarray
    groundtruth: pd.DataFrame = None

    @property
    def counts(self):
        return len(self.left), len(self.right), len(self.imu)


@dataclass(frozen=True)
class FrameBundle:
    """
    One stereo frame and the IMU samples of (previous frame, this frame].

    ``interpolated`` marks a last sample synthesized at the frame timestamp.
    ``has_imu`` is False when IMU data does not cover the whole interval.
    """

    index: int
    timestamp_ns: int
    left: Path
    right: Path
    imu: tuple
    has_imu: bool
    interpolated: bool = False

    @property
    def timestamp(self):
        return ns_to_seconds(self.timestamp_ns)


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------

def _data_lines(path):
    """(1-based file line, text) of every non-blank data row."""
    with open(path, encoding="utf-8") as f:
        return [(number, text.rstrip("\r\n")) for number, text in enumerate(f, start=1)
                if number > 1 and text.strip()]


def _read_table(path, n_columns, integer_columns=(0,), numeric=True):
    """
    Read an ASL CSV index with one header line.

    Raises:
        MalformedCsv: wrong field count or an unparseable value, with the
            1-based file line and column
    """
    lines = _data_lines(path)
    for number, text in lines:
        fields = text.split(",")
        if len(fields) != n_columns:
            column = len(fields) + 1 if len(fields) < n_columns else n_columns + 1
            raise MalformedCsv(path, number, column, f"expected {n_columns} fields, found {len(fields)}")
    if not lines:
        return pd.DataFrame(columns=range(n_columns), dtype=str)

    frame = pd.read_csv(path, header=None, skiprows=1, dtype=str, skipinitialspace=True,
                        skip_blank_lines=True, keep_default_na=False)
    numbers = [number for number, _ in lines]
    for col in range(n_columns):
        values = frame[col].str.strip()
        missing = values == ""
        if missing.any():
            row = int(np.argmax(missing.to_numpy()))
            raise MalformedCsv(path, numbers[row], col + 1, "missing value")
        if col in integer_columns:
            bad = ~values.str.fullmatch(r"-?\d+")
        elif numeric:
            bad = pd.to_numeric(values, errors="coerce").isna()
        else:
            continue
        if bad.any():
            row = int(np.argmax(bad.to_numpy()))
            raise MalformedCsv(path, numbers[row], col + 1, f"cannot parse {values.iloc[row]!r}")
    return frame


def _check_sorted(path, stamps):
    steps = np.diff(stamps)
    if np.any(steps <= 0):
        row = int(np.argmax(steps <= 0)) + 1
        raise UnsortedTimestamps(f"{path}: timestamps not strictly increasing at data row {row + 1}")


def _read_camera(folder):
    path = folder / "data.csv"
    if not path.is_file():
        raise MissingSensorDir(folder)
    frame = _read_table(path, 2, numeric=False)
    stamps = frame[0].str.strip().astype("int64").to_numpy()
    _check_sorted(path, stamps)
    return [ImageRecord(int(t), folder / "data" / name.strip()) for t, name in zip(stamps, frame[1])]


def _read_imu(folder):
    path = folder / "data.csv"
    if not path.is_file():
        raise MissingSensorDir(folder)
    frame = _read_table(path, 7)
    stamps = frame[0].str.strip().astype("int64").to_numpy()
    _check_sorted(path, stamps)
    values = frame.iloc[:, 1:].astype(float).to_numpy()
    samples = [ImuSample(ns_to_seconds(t), v[0:3], v[3:6]) for t, v in zip(stamps, values)]
    return samples, stamps


def load_groundtruth(path):
    """
    Ground-truth states of an ASL ``state_groundtruth_estimate0/data.csv``.

    Returns:
        pd.DataFrame: columns timestamp, px, py, pz, qw, qx, qy, qz, vx, vy, vz
    """
    path = Path(path)
    frame = _read_table(path, len(GROUNDTRUTH_COLUMNS))
    stamps = frame[0].str.strip().astype("int64").to_numpy()
    _check_sorted(path, stamps)
    values = frame.iloc[:, 1:11].astype(float).to_numpy()
    table = pd.DataFrame(values, columns=["px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"])
    table.insert(0, "timestamp", [ns_to_seconds(t) for t in stamps])
    return table


def load_euroc(root):
    """
    Load a recording in the ASL layout.

    Args:
        root: dataset folder (containing ``mav0``) or the ``mav0`` folder itself

    Returns:
        SensorStreams: time-sorted streams; stereo pairs matched within 1 ms

    Raises:
        MissingSensorDir: cam0, cam1 or imu0 is absent
        MalformedCsv: an index file does not parse
        UnsortedTimestamps: an index is not strictly increasing
    """
    root = Path(root)
    if not root.exists():
        raise MissingSensorDir(root)
    mav = root / "mav0" if (root / "mav0").is_dir() else root
    for name in ("cam0", "cam1", "imu0"):
        if not (mav / name).is_dir():
            raise MissingSensorDir(mav / name)

    left = _read_camera(mav / "cam0")
    right = _read_camera(mav / "cam1")
    imu, imu_ns = _read_imu(mav / "imu0")

    right_stamps = np.array([r.timestamp_ns for r in right], dtype=np.int64)
    pairs_left, pairs_right = [], []
    for record in left:
        if not len(right_stamps):
            break
        k = int(np.argmin(np.abs(right_stamps - record.timestamp_ns)))
        if abs(int(right_stamps[k]) - record.timestamp_ns) <= STEREO_PAIR_TOLERANCE_NS:
            pairs_left.append(record)
            pairs_right.append(right[k])
    if len(pairs_left) < len(left):
        logger.warning("%d left images without a right image within 1 ms were dropped",
                       len(left) - len(pairs_left))

    gt_path = mav / "state_groundtruth_estimate0" / "data.csv"
    groundtruth = load_groundtruth(gt_path) if gt_path.is_file() else None
    logger.info("loaded %s: %d stereo pairs, %d IMU samples%s", root, len(pairs_left), len(imu),
                ", ground truth" if groundtruth is not None else "")
    return SensorStreams(root, pairs_left, pairs_right, imu, imu_ns, groundtruth)


# ---------------------------------------------------------------------------
# synchronization
# ---------------------------------------------------------------------------

def _interpolate(imu, imu_ns, t_ns):
    k = int(np.searchsorted(imu_ns, t_ns))
    a, b = imu[k - 1], imu[k]
    w = (t_ns - int(imu_ns[k - 1])) / float(int(imu_ns[k]) - int(imu_ns[k - 1]))
    return ImuSample(ns_to_seconds(t_ns), (1 - w) * a.gyro + w * b.gyro, (1 - w) * a.accel + w * b.accel)


def sync_streams(streams):
    """
    Cut the IMU stream into per-frame bundles.

    Frame k receives the samples with timestamps in (t_{k-1}, t_k]; the first
    frame receives the sample at t_0. When no raw sample falls exactly on a
    frame timestamp inside the IMU range, one is interpolated there, so each
    interval starts where the previous one ended.

    Returns:
        list: FrameBundle per stereo pair

    Raises:
        EmptyOverlap: image and IMU time ranges do not intersect
    """
    imu, imu_ns = streams.imu, np.asarray(streams.imu_ns, dtype=np.int64)
    frames = [r.timestamp_ns for r in streams.left]
    if not frames or not len(imu_ns) or frames[-1] < imu_ns[0] or frames[0] > imu_ns[-1]:
        raise EmptyOverlap(f"images and IMU of {streams.root} do not overlap in time")
    first_imu, last_imu = int(imu_ns[0]), int(imu_ns[-1])

    bundles = []
    previous = None
    for index, (left, right) in enumerate(zip(streams.left, streams.right)):
        t = left.timestamp_ns
        hi = int(np.searchsorted(imu_ns, t, side="right"))
        exact = hi > 0 and int(imu_ns[hi - 1]) == t
        if previous is None:
            samples = [imu[hi - 1]] if exact else []
        else:
            lo = int(np.searchsorted(imu_ns, previous, side="right"))
            samples = list(imu[lo:hi])
        interpolated = first_imu < t <= last_imu and not exact
        if interpolated:
            samples.append(_interpolate(imu, imu_ns, t))
        has_imu = previous is not None and previous >= first_imu and t <= last_imu
        bundles.append(FrameBundle(index, t, left.path, right.path, tuple(samples), has_imu, interpolated))
        previous = t
    missing = sum(not b.has_imu for b in bundles)
    if missing:
        logger.info("%d of %d frames lack full IMU coverage", missing, len(bundles))
    return bundles


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _write_index(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def export_euroc(root, frames, imu, imu_ns, groundtruth=None):
    """
    Write a recording in the ASL layout.

    Args:
        root: output folder; ``mav0`` is created inside
        frames: iterable of (timestamp ns, left image, right image)
        imu (list): ImuSample readings
        imu_ns: exact IMU timestamps in ns
        groundtruth: iterable of (timestamp ns, Transform T_w_b, velocity,
            gyro bias, accel bias), optional

    Returns:
        Path: the ``mav0`` folder
    """
    mav = Path(root) / "mav0"
    cameras = {"cam0": [], "cam1": []}
    for name in cameras:
        (mav / name / "data").mkdir(parents=True, exist_ok=True)
    for t_ns, left, right in frames:
        for name, image in (("cam0", left), ("cam1", right)):
            filename = f"{int(t_ns)}.png"
            cv2.imwrite(str(mav / name / "data" / filename), image)
            cameras[name].append((int(t_ns), filename))
    for name, rows in cameras.items():
        _write_index(mav / name / "data.csv", CAMERA_COLUMNS, rows)

    _write_index(mav / "imu0" / "data.csv", IMU_COLUMNS,
                 [(int(t), *s.gyro, *s.accel) for t, s in zip(imu_ns, imu)])
    if groundtruth is not None:
        rows = []
        for t_ns, T, velocity, bias_gyro, bias_acc in groundtruth:
            rows.append((int(t_ns), *T.translation, *T.rotation.q, *velocity, *bias_gyro, *bias_acc))
        _write_index(mav / "state_groundtruth_estimate0" / "data.csv", GROUNDTRUTH_COLUMNS, rows)
    logger.info("exported %d stereo pairs and %d IMU samples to %s",
                len(cameras["cam0"]), len(imu), mav)
    return mav


def groundtruth_poses(table):
    """(timestamp, Transform) pairs from a ground-truth DataFrame."""
    return [(float(row.timestamp), Transform(Rotation([row.qw, row.qx, row.qy, row.qz]), [row.px, row.py, row.pz]))
            for row in table.itertuples(index=False)]


def load_image(path):
    """Grayscale image as uint8."""
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return image
