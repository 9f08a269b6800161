"""Rigid-body math, pinhole projection, plane-induced homographies,
triangulation, and RANSAC plane fitting.

Conventions used throughout the package:
  - Poses are world-from-camera: X_world = R @ X_cam + t.
  - Quaternions are stored as (x, y, z, w) with unit norm.
  - se(3) tangents are laid out (wx, wy, wz, tx, ty, tz), rotation first.
  - Pixels are (u, v); u runs along image width. Pixel centers sit on
    integer coordinates, so the image rectangle is [-0.5, W-0.5] x [-0.5, H-0.5].
  - The depth argument of `homography` is the z coordinate of the point in
    the reference camera frame, not distance along the ray.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateGeometry,
    DegenerateParallax,
    DegenerateWarp,
    InsufficientPoints,
    NonPositiveDepth,
    PixelOutOfBounds,
)

_EZ = np.array([0.0, 0.0, 1.0])


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


@dataclass
class SE3Pose:
    """World-from-camera rigid transform: X_world = R @ X_cam + t."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be nonzero and finite")
        self.quaternion = q / n
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_matrix()

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        r1 = Rotation.from_quat(self.quaternion)
        r2 = Rotation.from_quat(other.quaternion)
        q = (r1 * r2).as_quat()
        t = r1.apply(other.translation) + self.translation
        return SE3Pose(q, t)

    def inverse(self) -> "SE3Pose":
        r_inv = Rotation.from_quat(self.quaternion).inv()
        return SE3Pose(r_inv.as_quat(), -r_inv.apply(self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points to world frame; points shaped (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation_matrix()


def _rot_coeffs(theta_sq: float) -> tuple[float, float, float]:
    """Coefficients (sin t/t, (1-cos t)/t^2, (t-sin t)/t^3) stable near zero."""
    if theta_sq < 1e-16:
        return (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        )
    t = np.sqrt(theta_sq)
    return (
        np.sin(t) / t,
        (1.0 - np.cos(t)) / theta_sq,
        (t - np.sin(t)) / (theta_sq * t),
    )


def se3_exp(xi: np.ndarray) -> SE3Pose:
    """Exponential map of se(3); xi = (omega, rho) with rotation first."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("tangent must be finite")
    omega, rho = xi[:3], xi[3:]
    theta_sq = float(omega @ omega)
    q = Rotation.from_rotvec(omega).as_quat()
    _, b, c = _rot_coeffs(theta_sq)
    k = _skew(omega)
    v_mat = np.eye(3) + b * k + c * (k @ k)
    return SE3Pose(q, v_mat @ rho)


def se3_log(pose: SE3Pose) -> np.ndarray:
    """Inverse of se3_exp; returns (omega, rho)."""
    omega = Rotation.from_quat(pose.quaternion).as_rotvec()
    theta_sq = float(omega @ omega)
    k = _skew(omega)
    if theta_sq < 1e-8:
        d = 1.0 / 12.0 + theta_sq / 720.0
    else:
        t = np.sqrt(theta_sq)
        d = 1.0 / theta_sq - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))
    v_inv = np.eye(3) - 0.5 * k + d * (k @ k)
    return np.concatenate([omega, v_inv @ pose.translation])


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float | None = None

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.baseline is not None and self.baseline <= 0:
            raise ValueError("baseline must be positive when present")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class Frame:
    """A camera with an optimizable left-multiplied se(3) correction.

    The effective pose is exp(pose_delta) o pose. The gauge frame of a
    problem keeps pose_delta identically zero.
    """

    id: int
    intrinsics: CameraIntrinsics
    pose: SE3Pose
    pose_delta: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.pose_delta is None:
            self.pose_delta = np.zeros(6)
        self.pose_delta = np.asarray(self.pose_delta, dtype=np.float64).reshape(6).copy()

    def effective_pose(self) -> SE3Pose:
        if np.any(self.pose_delta):
            return se3_exp(self.pose_delta).compose(self.pose)
        return self.pose


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    source_frame: int
    pixel: np.ndarray

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("ray direction must be nonzero")
        self.direction = d / n
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2).copy()


@dataclass
class Plane:
    """Plane {x : normal . x = offset}, normal oriented toward world +z."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("plane normal must be nonzero")
        n = n / norm
        off = float(self.offset) / norm
        flip = n[2] < -1e-12 or (
            abs(n[2]) <= 1e-12 and (n[0] < -1e-12 or (abs(n[0]) <= 1e-12 and n[1] < 0))
        )
        if flip:
            n, off = -n, -off
        self.normal = n
        self.offset = off

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.normal - self.offset


@dataclass
class Box:
    """Axis-aligned box with corners lo <= hi."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3).copy()
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3).copy()
        if np.any(self.hi <= self.lo):
            raise ValueError("box must have positive extent on all axes")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.all((pts >= self.lo - margin) & (pts <= self.hi + margin), axis=-1)

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=np.float64), self.lo, self.hi)

    def scaled(self, factor: float) -> "Box":
        c, h = self.center, 0.5 * self.extent * factor
        return Box(c - h, c + h)

    def cube_hull(self) -> "Box":
        """Smallest cube sharing this box's center and covering it."""
        h = 0.5 * float(self.extent.max())
        c = self.center
        return Box(c - h, c + h)

    def sample_uniform(self, count: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.uniform(size=(count, 3))
        return self.lo + u * self.extent


def project(point_world: np.ndarray, frame: Frame) -> np.ndarray:
    """Pinhole projection of world points (..., 3) into frame pixels (..., 2)."""
    pose = frame.effective_pose()
    xc = (np.asarray(point_world, dtype=np.float64) - pose.translation) @ pose.rotation_matrix()
    z = xc[..., 2]
    if np.any(z <= 1e-9):
        raise NonPositiveDepth("point has non-positive depth in the camera frame")
    k = frame.intrinsics
    u = k.fx * xc[..., 0] / z + k.cx
    v = k.fy * xc[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def project_many(points: np.ndarray, frame: Frame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Masked batch projection: returns (pixels, z depth, valid).

    Unlike `project` this never raises; points at or behind the camera get
    valid = False and a clamped depth so the division stays finite.
    """
    pose = frame.effective_pose()
    xc = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation_matrix()
    z = xc[..., 2]
    valid = z > 1e-9
    z_safe = np.where(valid, z, 1.0)
    k = frame.intrinsics
    u = k.fx * xc[..., 0] / z_safe + k.cx
    v = k.fy * xc[..., 1] / z_safe + k.cy
    return np.stack([u, v], axis=-1), z, valid


def _check_pixel_bounds(pixels: np.ndarray, intr: CameraIntrinsics) -> None:
    u, v = pixels[..., 0], pixels[..., 1]
    bad = (u < -0.5) | (u > intr.width - 0.5) | (v < -0.5) | (v > intr.height - 0.5)
    if np.any(bad):
        raise PixelOutOfBounds(f"pixel outside [{-0.5}, {intr.width - 0.5}] x [{-0.5}, {intr.height - 0.5}]")


def cast_rays(frame: Frame, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Back-project pixels (N, 2) to (shared origin, unit directions (N, 3))."""
    pix = np.asarray(pixels, dtype=np.float64)
    _check_pixel_bounds(pix, frame.intrinsics)
    pose = frame.effective_pose()
    k_inv = frame.intrinsics.inverse_matrix()
    hom = np.concatenate([pix, np.ones(pix.shape[:-1] + (1,))], axis=-1)
    d_cam = hom @ k_inv.T
    d_world = d_cam @ pose.rotation_matrix().T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return pose.translation.copy(), d_world


def cast_ray(frame: Frame, pixel: np.ndarray) -> Ray:
    origin, d = cast_rays(frame, np.asarray(pixel, dtype=np.float64).reshape(1, 2))
    return Ray(origin, d[0], frame.id, pixel)


def homography(frame_j: Frame, frame_k: Frame, d: float) -> np.ndarray:
    """Plane-induced image map H(d) from frame j pixels to frame k pixels.

    The plane is fronto-parallel in frame j at z depth d (normal = j's
    principal axis). The sandwich below is fixed by the reprojection
    contract: for any world point X with z depth d in frame j,
    warp_pixel(H(d), project(X, j)) == project(X, k).
    """
    if d <= 0:
        raise NonPositiveDepth("homography depth must be positive")
    pose_j = frame_j.effective_pose()
    pose_k = frame_k.effective_pose()
    r_j, r_k = pose_j.rotation_matrix(), pose_k.rotation_matrix()
    r_rel = r_k.T @ r_j
    t_rel = r_k.T @ (pose_j.translation - pose_k.translation)
    mid = r_rel + np.outer(t_rel, _EZ) / d
    return frame_k.intrinsics.matrix() @ mid @ frame_j.intrinsics.inverse_matrix()


def warp_pixel(h: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Projective warp of pixels (2,) or (N, 2) by a 3x3 matrix."""
    p = np.asarray(p, dtype=np.float64)
    hom = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    mapped = hom @ np.asarray(h, dtype=np.float64).T
    w = mapped[..., 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateWarp("warped point lies on the plane at infinity")
    return mapped[..., :2] / w[..., None]


def triangulate_many(
    px_j: np.ndarray,
    px_k: np.ndarray,
    frame_j: Frame,
    frame_k: Frame,
    min_angle: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint triangulation of paired pixels (N, 2).

    Returns (points (N, 3), ray angles (N,), valid mask). Rows with angle
    <= min_angle get valid = False instead of raising.
    """
    o1, d1 = cast_rays(frame_j, np.atleast_2d(px_j))
    o2, d2 = cast_rays(frame_k, np.atleast_2d(px_k))
    cross = np.cross(d1, d2)
    sin_a = np.linalg.norm(cross, axis=-1)
    cos_a = np.sum(d1 * d2, axis=-1)
    angles = np.arctan2(sin_a, cos_a)
    valid = angles > min_angle

    # Solve for the closest points o1 + s d1 and o2 + u d2 on each ray pair.
    b = o2 - o1
    d12 = np.sum(d1 * d2, axis=-1)
    denom = 1.0 - d12**2
    denom_safe = np.where(valid, denom, 1.0)
    b_d1 = d1 @ b
    b_d2 = d2 @ b
    s = (b_d1 - d12 * b_d2) / denom_safe
    u = (d12 * b_d1 - b_d2) / denom_safe
    p1 = o1 + s[:, None] * d1
    p2 = o2 + u[:, None] * d2
    return 0.5 * (p1 + p2), angles, valid


def triangulate(px_j: np.ndarray, px_k: np.ndarray, frame_j: Frame, frame_k: Frame) -> np.ndarray:
    points, _, valid = triangulate_many(
        np.asarray(px_j, dtype=np.float64).reshape(1, 2),
        np.asarray(px_k, dtype=np.float64).reshape(1, 2),
        frame_j,
        frame_k,
    )
    if not valid[0]:
        raise DegenerateParallax("triangulation rays are nearly parallel")
    return points[0]


def ransac_plane(
    points: np.ndarray,
    inlier_threshold: float,
    iterations: int,
    seed: int,
) -> tuple[Plane, np.ndarray]:
    """Maximal-support plane from random 3-point hypotheses.

    The winning hypothesis (ties broken by first occurrence) is refined by
    total least squares over its inliers; the returned inlier indices are
    measured against the refined plane.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_pts = pts.shape[0]
    if n_pts < 3:
        raise InsufficientPoints(f"need >= 3 points, got {n_pts}")
    rng = np.random.default_rng(seed)

    best_count = 0
    best_inliers = None
    for _ in range(iterations):
        idx = rng.choice(n_pts, size=3, replace=False)
        a, b, c = pts[idx]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = np.abs(pts @ normal - normal @ a)
        inliers = dist <= inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None:
        raise DegenerateGeometry("all sampled hypotheses were collinear")

    support = pts[best_inliers]
    centroid = support.mean(axis=0)
    _, _, vt = np.linalg.svd(support - centroid, full_matrices=False)
    plane = Plane(vt[2], float(vt[2] @ centroid))
    final = np.flatnonzero(np.abs(plane.signed_distance(pts)) <= inlier_threshold)
    return plane, final


_SKEW_BASIS = np.zeros((3, 9))
_SKEW_BASIS[2, 1] = -1.0
_SKEW_BASIS[1, 2] = 1.0
_SKEW_BASIS[2, 3] = 1.0
_SKEW_BASIS[0, 5] = -1.0
_SKEW_BASIS[1, 6] = -1.0
_SKEW_BASIS[0, 7] = 1.0


def pose_matrices_tape(deltas, base_rotations: np.ndarray, base_translations: np.ndarray):
    """Effective pose matrices of exp(delta) o base_pose for a stack of frames.

    `deltas` is (F, 6) tangent coordinates, either a tape variable or a plain
    array; the base pose stacks are constants. Returns (R_eff, t_eff) with
    shapes (F, 3, 3) and (F, 3), in the same mode as `deltas`. The Rodrigues
    coefficients are expressed in theta^2 so the Taylor/exact switch stays
    differentiable near the identity.
    """
    from . import autodiff as ad

    base_r = np.asarray(base_rotations, dtype=np.float64)
    base_t = np.asarray(base_translations, dtype=np.float64)
    omega = deltas[:, 0:3]
    rho = deltas[:, 3:6]
    u = ad.vsum(omega * omega, axis=1)
    small = ad.value_of(u) < 1e-6
    u_safe = ad.maximum(u, 1e-12)
    theta = ad.sqrt(u_safe)
    sin_t = ad.sin(theta)
    cos_t = ad.cos(theta)
    u2 = u * u
    coeff_a = ad.where(small, 1.0 - u / 6.0 + u2 / 120.0, sin_t / theta)
    coeff_b = ad.where(small, 0.5 - u / 24.0 + u2 / 720.0, (1.0 - cos_t) / u_safe)
    coeff_c = ad.where(
        small, 1.0 / 6.0 - u / 120.0 + u2 / 5040.0, (theta - sin_t) / (u_safe * theta)
    )
    k = ad.reshape(ad.matmul(omega, _SKEW_BASIS), (-1, 3, 3))
    k2 = ad.bmm(k, k)
    a3 = ad.reshape(coeff_a, (-1, 1, 1))
    b3 = ad.reshape(coeff_b, (-1, 1, 1))
    c3 = ad.reshape(coeff_c, (-1, 1, 1))
    eye = np.eye(3)
    r_delta = eye + a3 * k + b3 * k2
    v_mat = eye + b3 * k + c3 * k2
    t_delta = ad.bmv(v_mat, rho)
    r_eff = ad.bmm(r_delta, base_r)
    t_eff = ad.bmv(r_delta, base_t) + t_delta
    return r_eff, t_eff
