"""Synthetic ground-truth generator: analytic SDF scenes, exact flow and
disparity maps by ray casting, flat-albedo images, and pose perturbation.

Scenes are unions of primitives with exact signed distance (plane, sphere,
axis-aligned box), so cast depths, flow, and disparity are independent of
anything the training pipeline computes. World axes: x along the initial
driving direction, z up. Disparity uses optical-axis depth (z in the camera
frame), which makes the stereo identity flow_left_to_right = (-disparity, 0)
exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import MissingBaseline
from .geometry import Box, CameraIntrinsics, Frame, Plane, Ray, SE3Pose, cast_rays, project_many, se3_exp


# ------------------------------------------------------------- primitives


@dataclass
class PlanePrim:
    plane: Plane
    albedo: tuple = (0.5, 0.5, 0.5)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.plane.signed_distance(points)


@dataclass
class SpherePrim:
    center: np.ndarray
    radius: float
    albedo: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=-1) - self.radius


@dataclass
class BoxPrim:
    center: np.ndarray
    half: np.ndarray
    albedo: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half = np.asarray(self.half, dtype=np.float64).reshape(3)
        if np.any(self.half <= 0):
            raise ValueError("box half extents must be positive")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class SceneSpec:
    """Union (pointwise min) of analytic-SDF primitives."""

    primitives: list

    def __post_init__(self) -> None:
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def sdf(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(distance, nearest primitive index) at each point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        stack = np.stack([p.sdf(points) for p in self.primitives], axis=0)
        prim = np.argmin(stack, axis=0)
        return stack[prim, np.arange(points.shape[0])], prim

    def normals(self, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = np.empty_like(points)
        for a in range(3):
            step = np.zeros(3)
            step[a] = h
            g[:, a] = (self.sdf(points + step)[0] - self.sdf(points - step)[0]) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def albedos(self) -> np.ndarray:
        return np.array([p.albedo for p in self.primitives], dtype=np.float64)


@dataclass
class TrajectorySpec:
    """Forward-facing trajectory: constant step along the heading, small yaw
    increment per step, fixed pitch, constant height."""

    intrinsics: CameraIntrinsics
    frame_count: int = 12
    step: float = 0.3
    yaw_step_deg: float = 0.4
    pitch_deg: float = -12.0
    start: tuple = (0.0, 0.0, 0.85)

    def __post_init__(self) -> None:
        if self.frame_count < 1 or self.step <= 0:
            raise ValueError("need at least one frame and a positive step")


def _look_rotation(yaw: float, pitch: float) -> np.ndarray:
    """World-from-camera rotation for optical axis at (yaw, pitch), x right,
    y down (z up world)."""
    f = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def make_frames(traj: TrajectorySpec) -> list[Frame]:
    yaw_step = np.deg2rad(traj.yaw_step_deg)
    pitch = np.deg2rad(traj.pitch_deg)
    pos = np.asarray(traj.start, dtype=np.float64).copy()
    frames = []
    for i in range(traj.frame_count):
        yaw = i * yaw_step
        r = _look_rotation(yaw, pitch)
        q = Rotation.from_matrix(r).as_quat()
        frames.append(Frame(id=i, intrinsics=traj.intrinsics, pose=SE3Pose(q, pos.copy())))
        pos = pos + traj.step * np.array([np.cos(yaw), np.sin(yaw), 0.0])
    return frames


# ------------------------------------------------------------ ray casting


@dataclass
class Hit:
    depth: float
    point: np.ndarray
    primitive: int


def cast_many(
    scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray, max_t: float, max_iters: int = 512
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized sphere tracing. Returns (depth, hit mask, primitive id).

    A ray converges when its step shrinks below 1e-6 (one polish step is
    taken afterwards); anything still marching past max_t is a miss.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if origins.shape[0] == 1 and dirs.shape[0] > 1:
        origins = np.broadcast_to(origins, dirs.shape)
    m = dirs.shape[0]
    t = np.zeros(m)
    hit = np.zeros(m, dtype=bool)
    prim = np.full(m, -1, dtype=np.int64)
    alive = np.arange(m)
    for _ in range(max_iters):
        if alive.size == 0:
            break
        pts = origins[alive] + t[alive, None] * dirs[alive]
        d, pid = scene.sdf(pts)
        conv = d < 1e-6
        if np.any(conv):
            done = alive[conv]
            hit[done] = True
            prim[done] = pid[conv]
            t[done] += d[conv]
        t[alive[~conv]] += d[~conv]
        alive = alive[~conv]
        alive = alive[t[alive] < max_t]
    return t, hit, prim


def cast_scene(scene: SceneSpec, ray: Ray, max_t: float) -> Hit | None:
    """Sphere-traced first intersection along one ray, or None at a miss."""
    if max_t <= 0:
        raise ValueError("max_t must be positive")
    t, hit, prim = cast_many(scene, ray.origin[None], ray.direction[None], max_t)
    if not hit[0]:
        return None
    return Hit(depth=float(t[0]), point=ray.origin + t[0] * ray.direction, primitive=int(prim[0]))


def _pixel_grid(intr: CameraIntrinsics) -> np.ndarray:
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    return np.stack([u, v], axis=-1).astype(np.float64)


def _axis_depth(frame: Frame, dirs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Optical-axis (z) depth of ray points at parameter t."""
    axis = frame.effective_pose().rotation_matrix()[:, 2]
    return t * (dirs @ axis)


def gt_flow(
    scene: SceneSpec,
    frame_j: Frame,
    frame_k: Frame,
    max_t: float,
    region: Box | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact flow map j->k (H, W, 2) with occlusion-aware validity.

    A pixel is valid when the cast from frame_j hits, the hit lies inside
    `region` (when given), the reprojection lands in frame_k's bounds, and a
    re-cast from frame_k reaches the same point within 1e-3 m.
    """
    intr_j, intr_k = frame_j.intrinsics, frame_k.intrinsics
    if (intr_j.width, intr_j.height) != (intr_k.width, intr_k.height):
        raise ValueError("frames must share image dimensions")
    pix = _pixel_grid(intr_j).reshape(-1, 2)
    origin, dirs = cast_rays(frame_j, pix)
    t, hit, _ = cast_many(scene, origin[None], dirs, max_t)
    points = origin + t[:, None] * dirs

    proj, _, in_front = project_many(points, frame_k)
    inb = (
        (proj[:, 0] >= -0.5)
        & (proj[:, 0] <= intr_k.width - 0.5)
        & (proj[:, 1] >= -0.5)
        & (proj[:, 1] <= intr_k.height - 0.5)
    )
    valid = hit & in_front & inb
    if region is not None:
        valid &= region.contains(points)

    check = np.flatnonzero(valid)
    if check.size:
        c_k = frame_k.effective_pose().translation
        rel = points[check] - c_k
        dist = np.linalg.norm(rel, axis=-1)
        re_t, re_hit, _ = cast_many(scene, c_k[None], rel / dist[:, None], max_t)
        valid[check] &= re_hit & (np.abs(re_t - dist) <= 1e-3)

    flow = np.zeros_like(pix)
    flow[valid] = proj[valid] - pix[valid]
    h, w = intr_j.height, intr_j.width
    return flow.reshape(h, w, 2), valid.reshape(h, w)


def gt_disparity(
    scene: SceneSpec, frame: Frame, max_t: float, region: Box | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact stereo disparity map fx*b/z (H, W) with hit mask."""
    intr = frame.intrinsics
    if intr.baseline is None:
        raise MissingBaseline("trajectory has no stereo baseline")
    pix = _pixel_grid(intr).reshape(-1, 2)
    origin, dirs = cast_rays(frame, pix)
    t, hit, _ = cast_many(scene, origin[None], dirs, max_t)
    z = _axis_depth(frame, dirs, t)
    valid = hit & (z > 1e-9)
    if region is not None:
        valid &= region.contains(origin + t[:, None] * dirs)
    disp = np.zeros(pix.shape[0])
    disp[valid] = intr.fx * intr.baseline / z[valid]
    return disp.reshape(intr.height, intr.width), valid.reshape(intr.height, intr.width)


def gt_depth(
    scene: SceneSpec, frame: Frame, max_t: float, region: Box | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-parameter depth map (H, W) with hit mask."""
    intr = frame.intrinsics
    pix = _pixel_grid(intr).reshape(-1, 2)
    origin, dirs = cast_rays(frame, pix)
    t, hit, _ = cast_many(scene, origin[None], dirs, max_t)
    valid = hit.copy()
    if region is not None:
        valid &= region.contains(origin + t[:, None] * dirs)
    depth = np.where(valid, t, 0.0)
    return depth.reshape(intr.height, intr.width), valid.reshape(intr.height, intr.width)


def render_image(
    scene: SceneSpec,
    frame: Frame,
    max_t: float,
    gain: float = 1.0,
    sky: tuple = (0.55, 0.66, 0.8),
) -> np.ndarray:
    """Flat-albedo render (H, W, 3) in [0, 1]; misses show the sky color."""
    intr = frame.intrinsics
    pix = _pixel_grid(intr).reshape(-1, 2)
    origin, dirs = cast_rays(frame, pix)
    _, hit, prim = cast_many(scene, origin[None], dirs, max_t)
    img = np.tile(np.asarray(sky, dtype=np.float64), (pix.shape[0], 1))
    img[hit] = scene.albedos()[prim[hit]]
    return np.clip(img * gain, 0.0, 1.0).reshape(intr.height, intr.width, 3)


def surface_points(
    scene: SceneSpec,
    frames: list[Frame],
    max_t: float,
    region: Box | None = None,
    stride: int = 2,
    max_points: int = 40000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Visible-surface samples (points, outward normals) pooled over frames."""
    pts = []
    for frame in frames:
        intr = frame.intrinsics
        grid = _pixel_grid(intr)[::stride, ::stride].reshape(-1, 2)
        origin, dirs = cast_rays(frame, grid)
        t, hit, _ = cast_many(scene, origin[None], dirs, max_t)
        p = origin + t[hit, None] * dirs[hit]
        if region is not None:
            p = p[region.contains(p)]
        pts.append(p)
    pts = np.concatenate(pts, axis=0)
    if pts.shape[0] > max_points:
        keep = np.random.default_rng(seed).choice(pts.shape[0], size=max_points, replace=False)
        pts = pts[np.sort(keep)]
    return pts, scene.normals(pts)


def perturb_poses(
    frames: list[Frame], sigma_trans: float, sigma_rot: float, seed: int
) -> tuple[list[Frame], list[Frame]]:
    """(noisy frames, ground-truth copies); the first frame is the gauge and
    keeps its exact pose. Tangent noise is drawn rotation-first per frame."""
    if sigma_trans < 0 or sigma_rot < 0:
        raise ValueError("noise scales must be nonnegative")
    rng = np.random.default_rng(seed)
    noisy, gt = [], []
    for i, f in enumerate(frames):
        gt.append(Frame(id=f.id, intrinsics=f.intrinsics, pose=SE3Pose(f.pose.quaternion, f.pose.translation)))
        if i == 0:
            pose = SE3Pose(f.pose.quaternion, f.pose.translation)
        else:
            xi = np.concatenate([rng.normal(0.0, sigma_rot, 3), rng.normal(0.0, sigma_trans, 3)])
            pose = se3_exp(xi).compose(f.pose)
        noisy.append(Frame(id=f.id, intrinsics=f.intrinsics, pose=pose))
    return noisy, gt


# ---------------------------------------------------------------- presets


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=80.0, fy=80.0, cx=47.5, cy=31.5, width=96, height=64, baseline=0.2)


def default_scene() -> SceneSpec:
    return SceneSpec(
        [
            PlanePrim(Plane(np.array([0.0, 0.0, 1.0]), 0.0), albedo=(0.32, 0.36, 0.30)),
            BoxPrim((3.8, -1.15, 0.325), (0.35, 0.30, 0.325), albedo=(0.72, 0.25, 0.20)),
            BoxPrim((5.1, 1.00, 0.400), (0.30, 0.35, 0.400), albedo=(0.20, 0.35, 0.75)),
            BoxPrim((6.6, -0.45, 0.275), (0.40, 0.30, 0.275), albedo=(0.75, 0.65, 0.20)),
            SpherePrim((4.3, 0.30, 0.45), 0.45, albedo=(0.25, 0.65, 0.30)),
        ]
    )


def default_trajectory() -> TrajectorySpec:
    return TrajectorySpec(intrinsics=default_intrinsics())


def default_region() -> Box:
    """Close-range supervision box covering the traversed ground and objects."""
    return Box(np.array([-0.4, -3.2, -0.3]), np.array([9.6, 3.2, 2.2]))


DEFAULT_MAX_T = 14.0
DEFAULT_SHELLS = 3
DEFAULT_R_MAX = 16.0


@dataclass
class Dataset:
    """In-memory dataset bundle, serialized by the io module."""

    scene: SceneSpec
    intrinsics: CameraIntrinsics
    frames_gt: list[Frame]
    frames_noisy: list[Frame]
    region: Box
    max_t: float
    flows: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    disparities: dict[int, tuple[np.ndarray, np.ndarray]]
    images: dict[int, np.ndarray]
    points: np.ndarray
    normals: np.ndarray
    shells: int = DEFAULT_SHELLS
    r_max: float = DEFAULT_R_MAX
    gains: dict[int, float] = dc_field(default_factory=dict)


def generate_dataset(
    scene: SceneSpec | None = None,
    traj: TrajectorySpec | None = None,
    *,
    seed: int = 0,
    sigma_trans: float = 0.0,
    sigma_rot_deg: float = 0.0,
    max_t: float = DEFAULT_MAX_T,
    region: Box | None = None,
    with_images: bool = True,
    brightness_jitter: float = 0.0,
    sample_stride: int = 2,
) -> Dataset:
    """Cast the full supervision set for one trajectory.

    Flow is produced for consecutive pairs (j, j+1), disparity and images per
    frame. Pose noise uses `seed`; image gains jitter around 1 when
    `brightness_jitter` > 0.
    """
    scene = scene if scene is not None else default_scene()
    traj = traj if traj is not None else default_trajectory()
    region = region if region is not None else default_region()
    frames = make_frames(traj)
    noisy, gt = perturb_poses(frames, sigma_trans, np.deg2rad(sigma_rot_deg), seed)

    flows = {}
    for j in range(len(frames) - 1):
        flows[(j, j + 1)] = gt_flow(scene, frames[j], frames[j + 1], max_t, region)
    disparities = {j: gt_disparity(scene, frames[j], max_t, region) for j in range(len(frames))}

    images, gains = {}, {}
    if with_images:
        rng = np.random.default_rng((seed, 101))
        for j, frame in enumerate(frames):
            g = 1.0 + brightness_jitter * float(rng.uniform(-1.0, 1.0)) if brightness_jitter else 1.0
            gains[j] = g
            images[j] = render_image(scene, frame, max_t, gain=g)

    pts, normals = surface_points(scene, frames, max_t, region, stride=sample_stride, seed=seed)
    return Dataset(
        scene=scene,
        intrinsics=traj.intrinsics,
        frames_gt=gt,
        frames_noisy=noisy,
        region=region,
        max_t=max_t,
        flows=flows,
        disparities=disparities,
        images=images,
        points=pts,
        normals=normals,
        gains=gains,
    )
