"""
Stereo-Inertial Odometry - Configuration

This module contains the global configuration settings for the odometry
engine. Every tunable the pipeline reads is listed in ``DEFAULTS`` with its
default value; configuration files only need to name the keys they change.

Configuration files are flat UTF-8 text, one ``key = value`` per line, ``#``
starts a comment. Vectors are comma separated, booleans are ``true`` /
``false``. Presets live in the ``config/`` folder.

License: MIT
"""

from pathlib import Path

from odometry.errors import ConfigError

# Defaults for every tunable. Keys are grouped by the module that reads them.
DEFAULTS = {
    # -- run -------------------------------------------------------------
    "run.seed": 0,                        # seeds every RANSAC / k-medians draw
    "run.deterministic": False,           # single-threaded, iteration-capped

    # -- core geometry ---------------------------------------------------
    "geometry.min_parallax_deg": 1.0,     # triangulation parallax floor
    "geometry.pnp_threshold_px": 2.0,     # RANSAC reprojection threshold
    "geometry.pnp_confidence": 0.99,
    "geometry.pnp_max_iterations": 200,
    "geometry.pnp_min_inlier_ratio": 0.5,

    # -- frontend --------------------------------------------------------
    "frontend.max_features": 150,         # per-frame feature budget
    "frontend.min_distance_px": 20.0,     # at 752 px image width, scaled
    "frontend.quality_level": 0.01,       # Shi-Tomasi relative quality
    "frontend.subpix_window": 5,          # side of the refinement window
    "frontend.subpix_max_iterations": 20,
    "frontend.subpix_epsilon": 0.01,
    "frontend.klt_window": 21,
    "frontend.klt_max_iterations": 30,
    "frontend.fb_threshold_px": 0.5,      # forward-backward check
    "frontend.epipolar_tolerance_px": 1.5,
    "frontend.ransac_threshold_px": 1.0,
    "frontend.ransac_confidence": 0.99,

    # -- keyframe selection ----------------------------------------------
    "keyframe.max_interval_s": 1.0,
    "keyframe.min_parallax_px": 10.0,
    "keyframe.min_tracked": 20,

    # -- imu ---------------------------------------------------------------
    "imu.gravity": 9.80665,
    "imu.saturate_accel": True,
    "imu.saturate_gyro": True,
    "imu.saturation_accel": 4.0,          # max change per sample, m/s^2
    "imu.saturation_gyro": 0.5,           # max change per sample, rad/s
    "imu.accel_noise_density": 0.08,
    "imu.gyro_noise_density": 0.004,
    "imu.accel_random_walk": 4.0e-5,
    "imu.gyro_random_walk": 2.0e-6,
    "imu.max_bias_delta": 0.1,            # first-order correction bound
    "imu.max_accel_bias": 1.0,
    "imu.max_gyro_bias": 0.2,

    # -- optimizer ---------------------------------------------------------
    "optimizer.max_iterations": 10,
    "optimizer.tolerance": 1.0e-6,
    "optimizer.initial_damping": 1.0e-8,

    # -- initialization ------------------------------------------------------
    "init.window_size": 10,
    "init.min_stereo_features": 20,
    "init.max_reprojection_px": 2.0,
    "init.gyro_rank_tolerance": 1.0e-3,   # rad, second singular value floor
    "init.max_condition_number": 1.0e8,
    "init.gravity_tolerance": 0.2,        # relative, before refinement
    "init.max_alignment_residual": 0.5,   # RMS of the linear system
    "init.stationary_translation": 0.02,  # m over the window
    "init.stationary_gyro": 0.02,         # rad/s mean magnitude
    "init.loose_max_translation": 0.1,
    "init.loose_max_rotation_deg": 0.5,
    "init.loose_max_imu_cost": 1500.0,    # mean whitened cost per IMU factor
    "init.force_first_alignment": False,

    # -- tightly coupled backend ------------------------------------------
    "backend.window_size": 10,
    "backend.beta1": 1.0,
    "backend.beta2": 0.5,
    "backend.pixel_sigma": 1.5,
    "backend.outlier_threshold_px": 3.0,
    "backend.round2_budget_ms": 30.0,
    "backend.round2_max_iterations": 4,   # replaces the clock when deterministic
    "backend.landmark_cap": 200,
    "backend.dual_max_translation": 0.05,
    "backend.dual_max_rotation_deg": 0.5,
    "backend.min_stereo_count": 20,
    "backend.estimate_extrinsic": False,

    # -- loop closure --------------------------------------------------------
    "loop.enabled": True,
    "loop.vocabulary_path": "",
    "loop.vocabulary_k": 10,
    "loop.vocabulary_levels": 3,
    "loop.training_keyframes": 20,
    "loop.min_pairs": 25,
    "loop.min_inliers": 15,
    "loop.min_gap_keyframes": 30,
    "loop.match_distance_bits": 64,
    "loop.max_candidates": 5,

    # -- tracking ------------------------------------------------------------
    "tracking.min_features": 10,          # fewer means total tracking loss

    # -- calibration (EuRoC MAV cam0/cam1 published values) -----------------
    "calib.cam0.intrinsics": (458.654, 457.296, 367.215, 248.375),
    "calib.cam0.distortion": (-0.28340811, 0.07395907, 0.00019359, 1.76187114e-05),
    "calib.cam0.resolution": (752, 480),
    "calib.cam0.T_BS": (
        0.0148655429818, -0.999880929698, 0.00414029679422, -0.0216401454975,
        0.999557249008, 0.0149672133247, 0.025715529948, -0.064676986768,
        -0.0257744366974, 0.00375618835797, 0.999660727178, 0.00981073058949,
        0.0, 0.0, 0.0, 1.0,
    ),
    "calib.cam1.intrinsics": (457.587, 456.134, 379.999, 255.238),
    "calib.cam1.distortion": (-0.28368365, 0.07451284, -0.00010473, -3.55590700e-05),
    "calib.cam1.resolution": (752, 480),
    "calib.cam1.T_BS": (
        0.0125552670891, -0.999755099723, 0.0182237714554, 0.0552347046319,
        0.999598781151, 0.0130119051815, 0.0251588363115, -0.0646171498843,
        -0.0254826519, 0.0179005967239, 0.999515059039, 0.00306204466934,
        0.0, 0.0, 0.0, 1.0,
    ),
}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(text)
            return lowered == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.split(",") if p.strip()]
            kind = int if all(isinstance(v, int) for v in default) else float
            return tuple(kind(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {text!r}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """
    Flat key -> value configuration with documented defaults.

    Unknown keys are rejected, missing keys fall back to ``DEFAULTS`` and
    every value is coerced to the type of its default.
    """

    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self._set(key, value)

    def _set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key}")
        default = DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(key, value, default)
        elif isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            value = bool(value)
        elif isinstance(default, (int, float)):
            value = type(default)(value)
        self._values[key] = value

    @classmethod
    def from_text(cls, text, source="<text>"):
        """
        Parse configuration text.

        Args:
            text (str): ``key = value`` lines
            source (str): name used in error messages

        Returns:
            Config: defaults overridden by the parsed keys

        Raises:
            ConfigError: on unknown keys, bad values or malformed lines
        """
        config = cls()
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{number}: unknown configuration key: {key}")
            config._values[key] = _parse_value(key, value, DEFAULTS[key])
        return config

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read configuration {path}: {e}") from e
        return cls.from_text(text, source=str(path))

    def to_text(self):
        """Serialize every key, so the snapshot alone reproduces a run."""
        lines = ["# stereo-inertial odometry configuration snapshot"]
        section = None
        for key in sorted(self._values):
            head = key.split(".", 1)[0]
            if head != section:
                lines.append("")
                lines.append(f"# {head}")
                section = head
            lines.append(f"{key} = {_format_value(self._values[key])}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides):
        """Return a copy with some keys replaced."""
        config = Config(self._values)
        for key, value in overrides.items():
            config._set(key, value)
        return config

    def __getitem__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown configuration key: {key}") from None

    def get(self, key, default=None):
        return self._values.get(key, default)

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def __repr__(self):
        changed = {k: v for k, v in self._values.items() if DEFAULTS[k] != v}
        return f"Config({changed})"
