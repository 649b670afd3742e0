"""
Shared fixtures for the odometry test suite.

Scenarios used here are short and deterministic; the long end-to-end runs
live in test_pipeline.py behind the ``slow`` marker.
"""

import numpy as np
import pytest

from config import Config
from odometry.geometry import CameraIntrinsics, Rotation, StereoRig, Transform
from odometry.simulation import Scenario, generate, synthetic_config, synthetic_rig


@pytest.fixture
def cfg():
    return Config()


@pytest.fixture
def sim_cfg():
    return synthetic_config().with_overrides({"run.deterministic": True})


@pytest.fixture
def rig():
    return synthetic_rig()


@pytest.fixture
def simple_rig():
    """Undistorted 100 px cameras, 0.5 m baseline along x, body = left camera."""
    intr = CameraIntrinsics(100.0, 100.0, 0.0, 0.0, width=200, height=200)
    return StereoRig(intr, intr, Transform(Rotation.identity(), [0.5, 0.0, 0.0]), Transform.identity())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def circle_bundle():
    return generate(Scenario(kind="Circle", duration=4.0, seed=3, radius=5.0, speed=1.0, points=3000))


@pytest.fixture(scope="session")
def figure8_bundle():
    return generate(Scenario(kind="Figure8", duration=6.0, seed=5, points=3000))
