"""
Tests for the configuration layer and its presets.
"""

from pathlib import Path

import pytest

from config import DEFAULTS, Config
from odometry.errors import ConfigError
from odometry.simulation import SYNTHETIC_CALIBRATION

PRESETS = Path(__file__).parent / "config"


def test_defaults_cover_every_key(cfg):
    for key, value in DEFAULTS.items():
        assert cfg[key] == value
    assert cfg["imu.gravity"] == 9.80665
    assert cfg["backend.window_size"] == 10


def test_parse_types_and_comments():
    cfg = Config.from_text("""
        # comment line
        run.seed = 7             # trailing comment
        run.deterministic = TRUE
        backend.pixel_sigma = 2
        loop.vocabulary_path = voc/tree.bin
        calib.cam0.resolution = 640, 480
    """)
    assert cfg["run.seed"] == 7
    assert cfg["run.deterministic"] is True
    assert cfg["backend.pixel_sigma"] == 2.0
    assert isinstance(cfg["backend.pixel_sigma"], float)
    assert cfg["loop.vocabulary_path"] == "voc/tree.bin"
    assert cfg["calib.cam0.resolution"] == (640, 480)
    assert cfg["frontend.max_features"] == DEFAULTS["frontend.max_features"]


@pytest.mark.parametrize("text, fragment", [
    ("run.sead = 3", ":1: unknown configuration key"),
    ("\nrun.seed 3", ":2: expected 'key = value'"),
    ("run.deterministic = yes", "invalid value for run.deterministic"),
    ("run.seed = 1.5", "invalid value for run.seed"),
    ("calib.cam0.intrinsics = 1, two, 3, 4", "invalid value for calib.cam0.intrinsics"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ConfigError) as info:
        Config.from_text(text, source="test.conf")
    assert fragment in str(info.value)
    assert isinstance(info.value, ValueError)


def test_snapshot_reproduces_configuration():
    cfg = Config().with_overrides({"run.seed": 11, "loop.enabled": False, "backend.beta2": 0.25})
    text = cfg.to_text()
    assert "run.seed = 11" in text
    assert "loop.enabled = false" in text
    assert Config.from_text(text) == cfg


def test_with_overrides_coerces_and_copies(cfg):
    changed = cfg.with_overrides({"backend.landmark_cap": "150", "imu.gravity": 9, "calib.cam0.resolution": [640, 480]})
    assert changed["backend.landmark_cap"] == 150
    assert changed["imu.gravity"] == 9.0
    assert changed["calib.cam0.resolution"] == (640, 480)
    assert cfg["backend.landmark_cap"] == DEFAULTS["backend.landmark_cap"]
    with pytest.raises(ConfigError):
        cfg.with_overrides({"backend.nonsense": 1})


def test_unknown_key_lookup(cfg):
    with pytest.raises(ConfigError):
        cfg["backend.nonsense"]
    assert cfg.get("backend.nonsense", 3) == 3


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "absent.conf")


def test_euroc_preset_matches_defaults():
    cfg = Config.load(PRESETS / "euroc.conf")
    for key in ("calib.cam0.intrinsics", "calib.cam1.T_BS", "imu.gyro_noise_density"):
        assert cfg[key] == DEFAULTS[key]


def test_synthetic_preset_matches_simulator_rig():
    cfg = Config.load(PRESETS / "synthetic.conf")
    for key, value in SYNTHETIC_CALIBRATION.items():
        assert cfg[key] == pytest.approx(value)
