"""
Stereo-Inertial Odometry - Error Types

Every failure the engine can report is a subclass of ``OdometryError``.
Errors that stem from bad user input (configuration, dataset files,
scenario strings) also derive from ``ValueError`` so the command line
front end can treat them as validation errors, the same way it treats
bad arguments.

License: MIT
"""


class OdometryError(Exception):
    """Base class for all errors raised by the odometry package."""


# ---------------------------------------------------------------------------
# core geometry
# ---------------------------------------------------------------------------

class GeometryError(OdometryError):
    """A geometric computation has no valid answer for its inputs."""


class NonPositiveDepth(GeometryError):
    """A point lies on or behind the image plane of the camera."""


class NonConvergence(GeometryError):
    """Iterative undistortion did not converge."""


class LowParallax(GeometryError):
    """Two rays are too close to parallel to triangulate."""


class BehindCamera(GeometryError):
    """The triangulated point lies behind one of the cameras."""


class TooFewPoints(GeometryError):
    """Not enough correspondences for a pose solve."""


class NoConsensus(GeometryError):
    """RANSAC did not reach the required inlier ratio."""


class TooFewPairs(GeometryError):
    """Not enough bearing pairs for epipolar RANSAC."""


# ---------------------------------------------------------------------------
# imu
# ---------------------------------------------------------------------------

class ImuError(OdometryError):
    """Invalid IMU input."""


class EmptyInterval(ImuError):
    """Fewer than two samples, or zero duration."""


class NonMonotonicTimestamps(ImuError):
    """Sample timestamps are not strictly increasing."""


class BiasDeltaTooLarge(ImuError):
    """A bias change is too large for the first-order correction."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SolverError(OdometryError):
    """Failure inside the least-squares engine."""


class NegativeInput(SolverError):
    """A robust loss was evaluated at a negative squared norm."""


class StructureError(SolverError):
    """A factor references a parameter block that does not exist."""


class NumericalFailure(SolverError):
    """A factor produced a non-finite residual or Jacobian."""


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

class InitializationError(OdometryError):
    """Visual or visual-inertial initialization failed."""


class InsufficientFeatures(InitializationError):
    """A keyframe carries too few stereo features."""


class PnpFailure(InitializationError):
    """A keyframe pose could not be recovered by PnP."""


class HighResidual(InitializationError):
    """Mean reprojection error after bundle adjustment is too high."""


class RankDeficient(InitializationError):
    """Rotations do not excite enough axes to calibrate the gyroscope."""


class IllConditioned(InitializationError):
    """The gravity/velocity system is degenerate for this motion."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


# ---------------------------------------------------------------------------
# loop closure
# ---------------------------------------------------------------------------

class LoopClosureError(OdometryError):
    """Place recognition failure."""


class EmptyKeyframe(LoopClosureError):
    """A keyframe has no stereo features to describe."""


class VocabularyFormatError(LoopClosureError, ValueError):
    """A vocabulary file does not follow the expected binary layout."""


# ---------------------------------------------------------------------------
# dataset / evaluation / configuration
# ---------------------------------------------------------------------------

class DatasetError(OdometryError, ValueError):
    """A dataset or trajectory file cannot be used."""


class MissingSensorDir(DatasetError):
    """A sensor directory of the ASL layout is missing."""

    def __init__(self, path):
        super().__init__(f"missing sensor directory: {path}")
        self.path = str(path)


class MalformedCsv(DatasetError):
    """A CSV or text file contains an unparseable value."""

    def __init__(self, path, line, column, detail=""):
        message = f"{path}: malformed value at line {line}, column {column}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.path = str(path)
        self.line = line
        self.column = column


class UnsortedTimestamps(DatasetError):
    """A stream is not strictly increasing in time."""


class EmptyOverlap(DatasetError):
    """Image and IMU streams do not overlap in time."""


class NoAssociations(DatasetError):
    """No estimate/ground-truth pose pairs within the association window."""


class ConfigError(OdometryError, ValueError):
    """Unknown key or invalid value in a configuration file."""


class ScenarioError(OdometryError, ValueError):
    """Invalid synthetic scenario description."""
