"""
Stereo-Inertial Odometry - Frame Sources

Every input the estimator can run on is a ``FrameSource``: an iterable of
``FrameInput`` records, one per stereo frame, each carrying the frame's
features and the IMU samples of (previous frame, this frame].

Sources:
- EurocSource: ASL recording on disk, images run through the feature tracker
- SyntheticSource: simulator bundle, exact or perturbed observations

License: MIT
"""

import logging
from dataclasses import dataclass

from odometry.dataset import groundtruth_poses, load_euroc, load_image, ns_to_seconds, sync_streams
from odometry.frontend import FeatureTracker, TrackerSettings
from odometry.geometry import build_rig
from odometry.trajectory import TrajectoryEstimate

logger = logging.getLogger(__name__)


@dataclass
class FrameInput:
    index: int
    timestamp: float
    features: object
    imu: tuple
    has_imu: bool
    left_image: object = None
    right_image: object = None


class FrameSource:
    """
    Base class for all frame sources.

    Attributes:
        rig (StereoRig): calibration the features were produced with
        name (str): short description used in logs and the run manifest
    """

    def __init__(self, rig, name):
        self.rig = rig
        self.name = name

    def __iter__(self):
        raise NotImplementedError

    def __len__(self):
        raise NotImplementedError

    def groundtruth(self):
        """Reference trajectory, or None when the source has none."""
        return None

    def describe(self):
        return {"type": type(self).__name__, "name": self.name, "frames": len(self)}


class EurocSource(FrameSource):
    """
    Frames of an ASL recording.

    Args:
        root: dataset folder (or its ``mav0``)
        cfg (Config): calibration and frontend settings
        keep_images (bool): attach the images to each FrameInput
    """

    def __init__(self, root, cfg, keep_images=True):
        super().__init__(build_rig(cfg), str(root))
        self.streams = load_euroc(root)
        self.bundles = sync_streams(self.streams)
        self.tracker = FeatureTracker(self.rig, TrackerSettings.from_config(cfg))
        self.keep_images = keep_images
        logger.info("EuRoC source %s: %d frames, %d IMU samples", root, len(self.bundles), len(self.streams.imu))

    def __len__(self):
        return len(self.bundles)

    def __iter__(self):
        for bundle in self.bundles:
            left = load_image(bundle.left)
            right = load_image(bundle.right)
            timestamp = ns_to_seconds(bundle.timestamp_ns)
            features = self.tracker.process(bundle.index, timestamp, left, right)
            yield FrameInput(bundle.index, timestamp, features, tuple(bundle.imu), bundle.has_imu,
                             left if self.keep_images else None, right if self.keep_images else None)

    def groundtruth(self):
        if self.streams.groundtruth is None:
            return None
        return TrajectoryEstimate.from_pairs(groundtruth_poses(self.streams.groundtruth))


class SyntheticSource(FrameSource):
    """
    Frames of a simulator bundle. Observations are used as generated, so no
    image processing takes place; ``render`` attaches dot images for the
    loop-closure descriptors.
    """

    def __init__(self, bundle, render=False):
        super().__init__(bundle.rig, bundle.scenario.to_spec())
        self.bundle = bundle
        self.render = render

    def __len__(self):
        return len(self.bundle.frames)

    def __iter__(self):
        bundle = self.bundle
        for k, features in enumerate(bundle.frames):
            imu = bundle.imu[:1] if k == 0 else bundle.imu_interval(k)[1:]
            left = right = None
            if self.render:
                left, right = bundle.render(k)
            yield FrameInput(k, features.timestamp, features, tuple(imu), True, left, right)

    def groundtruth(self):
        return self.bundle.groundtruth()

    def describe(self):
        info = super().describe()
        info["scenario"] = self.bundle.scenario.to_spec()
        return info
