"""
Stereo-Inertial Odometry - Core Geometry

Rotations, rigid transforms, the pinhole + radial-tangential camera model,
two-view triangulation and PnP with RANSAC. Everything here is a pure
function of its inputs.

Conventions:
- Quaternions are Hamilton, stored (w, x, y, z), canonical sign w >= 0.
- Manifold updates are right perturbations: q <- q * Exp(delta).
- ``Transform`` T_a_b maps coordinates of frame b into frame a.

License: MIT
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation as ScipyRotation

from odometry.errors import (
    BehindCamera,
    LowParallax,
    NoConsensus,
    NonConvergence,
    NonPositiveDepth,
    TooFewPoints,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# quaternion / so(3) helpers on raw arrays
# ---------------------------------------------------------------------------

def skew(v):
    """3-vector -> 3x3 skew-symmetric matrix, skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_canonical(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0.0 else q


def quat_multiply(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_left(q):
    """L(q) with q * p == L(q) @ p."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right(p):
    """R(p) with q * p == R(p) @ q."""
    w, x, y, z = p
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def quat_to_matrix_batch(q):
    """(n, 4) quaternions -> (n, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=float).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def skew_batch(v):
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def matrix_to_quat(R):
    x, y, z, w = ScipyRotation.from_matrix(R).as_quat()
    return quat_canonical([w, x, y, z])


def so3_exp(omega):
    """Rotation vector -> canonical unit quaternion (w, x, y, z)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.sqrt(omega @ omega)
    if theta < 1e-12:
        return quat_canonical(np.concatenate([[1.0], 0.5 * omega]))
    half = 0.5 * theta
    return quat_canonical(np.concatenate([[np.cos(half)], np.sin(half) / theta * omega]))


def so3_log(q):
    """Unit quaternion -> rotation vector with angle in [0, pi]."""
    q = quat_canonical(q)
    return ScipyRotation.from_quat([q[1], q[2], q[3], q[0]]).as_rotvec()


def right_jacobian(phi):
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3)
            - (1.0 - np.cos(theta)) / theta ** 2 * K
            + (theta - np.sin(theta)) / theta ** 3 * K @ K)


def right_jacobian_inverse(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coeff = 1.0 / theta ** 2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coeff * K @ K


def quat_error_jacobians(a, b):
    """
    Derivatives of e = 2 vec(a^-1 * b) under right perturbations of a and b.

    Returns:
        tuple: (e, J_a, J_b), each Jacobian 3x3.
    """
    err = quat_multiply(quat_conjugate(a), b)
    e = 2.0 * err[1:]
    J_b = quat_left(err)[1:, 1:]
    J_a = -quat_right(err)[1:, 1:]
    return e, J_a, J_b


# ---------------------------------------------------------------------------
# Rotation / Transform value types
# ---------------------------------------------------------------------------

class Rotation:
    """
    Unit quaternion rotation, Hamilton convention, (w, x, y, z), w >= 0.
    """

    __slots__ = ("q",)

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0)):
        self.q = quat_canonical(q)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def exp(cls, omega):
        return cls(so3_exp(omega))

    @classmethod
    def from_matrix(cls, R):
        return cls(matrix_to_quat(R))

    @classmethod
    def from_euler_zyx(cls, yaw, pitch, roll):
        x, y, z, w = ScipyRotation.from_euler("ZYX", [yaw, pitch, roll]).as_quat()
        return cls((w, x, y, z))

    def log(self):
        return so3_log(self.q)

    def matrix(self):
        return quat_to_matrix(self.q)

    def inverse(self):
        return Rotation(quat_conjugate(self.q))

    def apply(self, v):
        """Rotate a 3-vector or an (N, 3) array."""
        v = np.asarray(v, dtype=float)
        return v @ self.matrix().T

    def angle(self):
        """Rotation angle in radians."""
        return float(np.linalg.norm(self.log()))

    def yaw(self):
        R = self.matrix()
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def __mul__(self, other):
        return Rotation(quat_multiply(self.q, other.q))

    def __repr__(self):
        return f"Rotation(w={self.q[0]:.6f}, x={self.q[1]:.6f}, y={self.q[2]:.6f}, z={self.q[3]:.6f})"


@dataclass(frozen=True)
class Transform:
    """Rigid transform; ``T_a_b.apply(p_b)`` gives ``p_a``."""

    rotation: Rotation = field(default_factory=Rotation)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float).reshape(4, 4)
        return cls(Rotation.from_matrix(M[:3, :3]), M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation.matrix()
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        R_inv = self.rotation.inverse()
        return Transform(R_inv, -R_inv.apply(self.translation))

    def apply(self, points):
        return self.rotation.apply(points) + self.translation

    def __mul__(self, other):
        return Transform(self.rotation * other.rotation,
                         self.rotation.apply(other.translation) + self.translation)

    def distance_to(self, other):
        """(translation difference in m, rotation difference in degrees)."""
        dt = float(np.linalg.norm(self.translation - other.translation))
        dr = np.degrees((self.rotation.inverse() * other.rotation).angle())
        return dt, float(dr)


# ---------------------------------------------------------------------------
# camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with radial-tangential (k1, k2, p1, p2) distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 752
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def focal(self):
        return 0.5 * (self.fx + self.fy)

    @property
    def has_distortion(self):
        return any((self.k1, self.k2, self.p1, self.p2))

    def max_valid_radius(self):
        """
        Radius in the normalized plane beyond which radial distortion stops
        being monotonic (np.inf when it never does).
        """
        # d/dr [r (1 + k1 r^2 + k2 r^4)] = 1 + 3 k1 r^2 + 5 k2 r^4
        roots = np.roots([5.0 * self.k2, 0.0, 3.0 * self.k1, 0.0, 1.0]) if self.k2 else \
            np.roots([3.0 * self.k1, 0.0, 1.0]) if self.k1 else np.array([])
        real = [r.real for r in roots if abs(r.imag) < 1e-12 and r.real > 0]
        return min(real) if real else np.inf

    def distort(self, xy):
        """Distort normalized coordinates, (N, 2) -> (N, 2)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=1)

    def distort_jacobian(self, xy):
        """Per-point 2x2 Jacobian of ``distort``, shape (N, 2, 2)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x, y = xy[:, 0], xy[:, 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        dradial = self.k1 + 2.0 * self.k2 * r2  # d radial / d r2
        J = np.empty((len(xy), 2, 2))
        J[:, 0, 0] = radial + 2.0 * x * x * dradial + 2.0 * self.p1 * y + 6.0 * self.p2 * x
        J[:, 0, 1] = 2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        J[:, 1, 0] = 2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        J[:, 1, 1] = radial + 2.0 * y * y * dradial + 6.0 * self.p1 * y + 2.0 * self.p2 * x
        return J

    def project_points(self, points_cam):
        """
        Vectorized projection without depth checks.

        Returns:
            tuple: (pixels (N, 2), valid mask (N,)) where valid means z > 0
        """
        P = np.atleast_2d(np.asarray(points_cam, dtype=float))
        z = P[:, 2]
        valid = z > 0
        safe_z = np.where(valid, z, 1.0)
        xy = P[:, :2] / safe_z[:, None]
        if self.has_distortion:
            xy = self.distort(xy)
        pixels = np.empty_like(xy)
        pixels[:, 0] = self.fx * xy[:, 0] + self.cx
        pixels[:, 1] = self.fy * xy[:, 1] + self.cy
        return pixels, valid

    def unproject_points(self, pixels, max_iterations=10, tol=1e-12):
        """
        Vectorized iterative undistortion.

        Returns:
            tuple: (unit bearings (N, 3), converged mask (N,))
        """
        uv = np.atleast_2d(np.asarray(pixels, dtype=float))
        xd = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy], axis=1)
        xy = xd.copy()
        converged = np.ones(len(xy), dtype=bool)
        if self.has_distortion:
            converged[:] = False
            for _ in range(max_iterations):
                err = self.distort(xy) - xd
                converged = np.einsum("ij,ij->i", err, err) < tol * tol
                if converged.all():
                    break
                J = self.distort_jacobian(xy)
                step = np.linalg.solve(J, err[:, :, None])[:, :, 0]
                xy = np.where(converged[:, None], xy, xy - step)
            else:
                err = self.distort(xy) - xd
                converged = np.einsum("ij,ij->i", err, err) < tol * tol
            r = np.linalg.norm(xy, axis=1)
            converged &= np.isfinite(r) & (r < self.max_valid_radius())
        rays = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
        return rays / np.linalg.norm(rays, axis=1, keepdims=True), converged

    def contains(self, pixels, margin=0.0):
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= margin) & (pixels[:, 0] <= self.width - 1 - margin)
                & (pixels[:, 1] >= margin) & (pixels[:, 1] <= self.height - 1 - margin))


def project(intr, point_cam):
    """
    Project a camera-frame point to a pixel.

    Args:
        intr (CameraIntrinsics): camera model
        point_cam: 3-vector in the camera frame

    Returns:
        np.ndarray: pixel (u, v)

    Raises:
        NonPositiveDepth: if z <= 0
    """
    point_cam = np.asarray(point_cam, dtype=float)
    if point_cam[2] <= 0:
        raise NonPositiveDepth(f"point depth {point_cam[2]:.3g} is not positive")
    pixels, _ = intr.project_points(point_cam[None, :])
    return pixels[0]


def project_jacobian(intr, point_cam):
    """Pixel and its 2x3 Jacobian w.r.t. the camera-frame point."""
    P = np.asarray(point_cam, dtype=float)
    if P[2] <= 0:
        raise NonPositiveDepth(f"point depth {P[2]:.3g} is not positive")
    x, y, z = P
    xy = np.array([[x / z, y / z]])
    d_xy = np.array([[1.0 / z, 0.0, -x / (z * z)], [0.0, 1.0 / z, -y / (z * z)]])
    if intr.has_distortion:
        d_xy = intr.distort_jacobian(xy)[0] @ d_xy
    J = np.diag([intr.fx, intr.fy]) @ d_xy
    return project(intr, P), J


def unproject(intr, pixel):
    """
    Pixel -> unit bearing in the camera frame.

    Raises:
        NonConvergence: if undistortion fails within 10 iterations
    """
    pixel = np.asarray(pixel, dtype=float)
    if not np.all(np.isfinite(pixel)):
        raise NonConvergence("pixel is not finite")
    bearings, ok = intr.unproject_points(pixel[None, :])
    if not ok[0]:
        raise NonConvergence(f"undistortion of pixel {pixel} did not converge")
    return bearings[0]


@dataclass(frozen=True)
class StereoRig:
    """
    Calibrated stereo pair mounted on the IMU body.

    ``T_left_right`` maps right-camera coordinates into the left camera,
    ``T_body_left`` is T^b_c (left camera to body).
    """

    left: CameraIntrinsics
    right: CameraIntrinsics
    T_left_right: Transform
    T_body_left: Transform

    def __post_init__(self):
        if np.linalg.norm(self.T_left_right.translation) <= 0:
            raise ValueError("stereo baseline must be non-zero")

    @property
    def baseline(self):
        return float(np.linalg.norm(self.T_left_right.translation))

    @property
    def T_body_right(self):
        return self.T_body_left * self.T_left_right


def build_rig(cfg):
    """Build the stereo rig from the ``calib.*`` section of a configuration."""
    cams = []
    for name in ("cam0", "cam1"):
        fx, fy, cx, cy = cfg[f"calib.{name}.intrinsics"]
        k1, k2, p1, p2 = cfg[f"calib.{name}.distortion"]
        width, height = cfg[f"calib.{name}.resolution"]
        cams.append((CameraIntrinsics(fx, fy, cx, cy, k1, k2, p1, p2, width, height),
                     Transform.from_matrix(cfg[f"calib.{name}.T_BS"])))
    (left, T_b_c0), (right, T_b_c1) = cams
    return StereoRig(left, right, T_b_c0.inverse() * T_b_c1, T_b_c0)


@dataclass
class MapPoint:
    """A landmark: world position plus its inverse-depth anchoring."""

    position: np.ndarray
    anchor_id: int
    inverse_depth: float

    @classmethod
    def from_anchor(cls, T_w_anchor, bearing, inverse_depth, anchor_id):
        position = T_w_anchor.apply(np.asarray(bearing) / inverse_depth)
        return cls(position, anchor_id, float(inverse_depth))


# ---------------------------------------------------------------------------
# triangulation / PnP
# ---------------------------------------------------------------------------

def triangulate(T_wa, T_wb, bearing_a, bearing_b, min_parallax_deg=1.0):
    """
    Midpoint triangulation of two bearing rays.

    Args:
        T_wa, T_wb (Transform): camera-to-world poses
        bearing_a, bearing_b: unit bearings in each camera
        min_parallax_deg (float): minimum angle between the rays

    Returns:
        tuple: (point_w, parallax_deg)

    Raises:
        LowParallax: rays closer than ``min_parallax_deg``
        BehindCamera: the point has non-positive depth in either view
    """
    d_a = T_wa.rotation.apply(bearing_a)
    d_b = T_wb.rotation.apply(bearing_b)
    d_a /= np.linalg.norm(d_a)
    d_b /= np.linalg.norm(d_b)
    parallax = float(np.degrees(np.arccos(np.clip(d_a @ d_b, -1.0, 1.0))))
    if parallax < min_parallax_deg:
        raise LowParallax(f"parallax {parallax:.3f} deg below {min_parallax_deg} deg")

    A = np.stack([d_a, -d_b], axis=1)
    s, t = np.linalg.solve(A.T @ A, A.T @ (T_wb.translation - T_wa.translation))
    point = 0.5 * ((T_wa.translation + s * d_a) + (T_wb.translation + t * d_b))
    if T_wa.inverse().apply(point)[2] <= 0 or T_wb.inverse().apply(point)[2] <= 0:
        raise BehindCamera("triangulated point is behind a camera")
    return point, parallax


def _normalize_points(points):
    centroid = points.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.mean(np.linalg.norm(points - centroid, axis=1)), 1e-12)
    N = np.eye(4)
    N[:3, :3] *= scale
    N[:3, 3] = -scale * centroid
    return N


def _pnp_dlt(points_w, bearings):
    """Linear pose (R_cw, t_cw) from >= 6 point/bearing pairs."""
    N = _normalize_points(points_w)
    Xh = np.hstack([points_w, np.ones((len(points_w), 1))]) @ N.T
    rows = []
    for X, (bx, by, bz) in zip(Xh, bearings):
        zero = np.zeros(4)
        rows.append(np.concatenate([bz * X, zero, -bx * X]))
        rows.append(np.concatenate([zero, bz * X, -by * X]))
        rows.append(np.concatenate([by * X, -bx * X, zero]))
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    P = Vt[-1].reshape(3, 4) @ N
    U, S, Vt3 = np.linalg.svd(P[:, :3])
    R = U @ Vt3
    scale = S.mean()
    if np.linalg.det(R) < 0:
        R, scale = -R, -scale
    # det(R) > 0 also fixes the overall sign of the homogeneous solution
    return R, P[:, 3] / scale


def _bearing_errors(R, t, points_w, bearings):
    P = points_w @ R.T + t
    norms = np.linalg.norm(P, axis=1)
    err = np.linalg.norm(bearings - P / norms[:, None], axis=1)
    err[np.einsum("ij,ij->i", P, bearings) <= 0] = np.inf
    return err


def _refine_pose(R, t, points_w, bearings):
    def residuals(x):
        Rx = ScipyRotation.from_rotvec(x[:3]).as_matrix()
        P = points_w @ Rx.T + x[3:]
        return (bearings - P / np.linalg.norm(P, axis=1, keepdims=True)).ravel()

    x0 = np.concatenate([ScipyRotation.from_matrix(R).as_rotvec(), t])
    sol = least_squares(residuals, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return ScipyRotation.from_rotvec(sol.x[:3]).as_matrix(), sol.x[3:]


def pnp_ransac(points_w, bearings, *, focal_px=460.0, threshold_px=2.0, confidence=0.99,
               max_iterations=200, min_inlier_ratio=0.5, seed=0):
    """
    Camera pose from 3D points and unit bearings.

    Minimal DLT hypotheses inside RANSAC, then Levenberg-Marquardt refinement
    of the angular residual over the consensus set.

    Args:
        points_w: (N, 3) world points
        bearings: (N, 3) unit bearings in the camera
        focal_px (float): converts the pixel threshold into an angle
        threshold_px (float): inlier threshold in pixels
        confidence (float): RANSAC success probability
        max_iterations (int): RANSAC iteration cap
        min_inlier_ratio (float): required consensus fraction
        seed (int): RNG seed, sampling is deterministic

    Returns:
        tuple: (Transform T_w_c, inlier mask)

    Raises:
        TooFewPoints: fewer than 6 correspondences
        NoConsensus: best inlier ratio below ``min_inlier_ratio``
    """
    points_w = np.asarray(points_w, dtype=float).reshape(-1, 3)
    bearings = np.asarray(bearings, dtype=float).reshape(-1, 3)
    n = len(points_w)
    if n < 6:
        raise TooFewPoints(f"PnP needs at least 6 correspondences, got {n}")
    bearings = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    threshold = threshold_px / focal_px
    rng = np.random.default_rng(seed)

    best_mask = np.zeros(n, dtype=bool)
    needed = max_iterations
    iteration = 0
    while iteration < min(needed, max_iterations):
        iteration += 1
        sample = rng.choice(n, size=6, replace=False)
        try:
            R, t = _pnp_dlt(points_w[sample], bearings[sample])
        except np.linalg.LinAlgError:
            continue
        mask = _bearing_errors(R, t, points_w, bearings) < threshold
        if mask.sum() > best_mask.sum():
            best_mask = mask
            ratio = mask.sum() / n
            if ratio >= 1.0:
                break
            needed = int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - ratio ** 6)))
    logger.debug("PnP RANSAC: %d iterations, %d/%d inliers", iteration, best_mask.sum(), n)

    if best_mask.sum() < max(6, min_inlier_ratio * n):
        raise NoConsensus(f"PnP consensus {best_mask.sum()}/{n} below {min_inlier_ratio:.0%}")

    R, t = _pnp_dlt(points_w[best_mask], bearings[best_mask])
    inliers = best_mask
    for _ in range(3):
        R, t = _refine_pose(R, t, points_w[inliers], bearings[inliers])
        mask = _bearing_errors(R, t, points_w, bearings) < threshold
        if mask.sum() < 6 or np.array_equal(mask, inliers):
            break
        inliers = mask
    # the mask returned is the one the returned pose produces
    best_mask = _bearing_errors(R, t, points_w, bearings) < threshold
    if best_mask.sum() < max(6, min_inlier_ratio * n):
        raise NoConsensus(f"PnP consensus {best_mask.sum()}/{n} below {min_inlier_ratio:.0%}")

    T_c_w = Transform(Rotation.from_matrix(R), t)
    return T_c_w.inverse(), best_mask
