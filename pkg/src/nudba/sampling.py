"""Octree occupancy and ray sampling.

Close-range rays collect stratified samples inside the occupied leaves they
cross (grid traversal in voxel space); distant rays take one sample per
nested cuboid shell, contracted into the 4-D coordinates the distant field
hashes. The octree root is always a cube so a single scalar leaf size is
well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyPointCloud, InvalidShellIndex, RayInsideBoxOnly
from .geometry import Box, Ray


@dataclass
class Octree:
    box: Box
    max_depth: int
    occupancy: np.ndarray
    ignored_count: int = 0

    def __post_init__(self) -> None:
        n = 2**self.max_depth
        ext = self.box.extent
        if not np.allclose(ext, ext[0]):
            raise ValueError("octree root must be a cube")
        if self.occupancy.shape != (n, n, n) or self.occupancy.dtype != bool:
            raise ValueError("occupancy must be a (n,n,n) bool array")

    @property
    def leaf_size(self) -> float:
        return float(self.box.extent[0]) / 2**self.max_depth

    @property
    def leaf_diagonal(self) -> float:
        return self.leaf_size * np.sqrt(3.0)

    @property
    def occupied_count(self) -> int:
        return int(self.occupancy.sum())

    def codes(self) -> np.ndarray:
        """Flat leaf codes ix*n^2 + iy*n + iz of occupied leaves, sorted."""
        return np.flatnonzero(self.occupancy.ravel())

    def voxel_of(self, points: np.ndarray) -> np.ndarray:
        n = 2**self.max_depth
        idx = np.floor((np.atleast_2d(points) - self.box.lo) / self.leaf_size).astype(np.int64)
        return np.clip(idx, 0, n - 1)

    def occupied_at(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        inside = self.box.contains(pts)
        idx = self.voxel_of(pts)
        hit = self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
        return hit & inside

    def union(self, other: "Octree") -> "Octree":
        if other.max_depth != self.max_depth or not np.allclose(other.box.lo, self.box.lo):
            raise ValueError("octrees must share geometry")
        return Octree(self.box, self.max_depth, self.occupancy | other.occupancy)

    def dilated(self, steps: int = 1) -> "Octree":
        occ = ndimage.binary_dilation(self.occupancy, iterations=steps)
        return Octree(self.box, self.max_depth, occ)


def build_octree(points: np.ndarray, box: Box, max_depth: int) -> Octree:
    """Mark every leaf containing at least one point; the root becomes the
    cube hull of `box`. Points outside are skipped and counted."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyPointCloud("no points given")
    cube = box.cube_hull()
    inside = cube.contains(pts)
    ignored = int((~inside).sum())
    kept = pts[inside]
    if kept.shape[0] == 0:
        raise EmptyPointCloud("all points fall outside the box")
    n = 2**max_depth
    occ = np.zeros((n, n, n), dtype=bool)
    leaf = float(cube.extent[0]) / n
    idx = np.clip(np.floor((kept - cube.lo) / leaf).astype(np.int64), 0, n - 1)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return Octree(cube, max_depth, occ, ignored_count=ignored)


def update_octree(tree: Octree, field, band: float) -> Octree:
    """Re-mark occupancy from the field: a leaf is occupied iff the SDF at
    its center is within band + half the leaf diagonal.

    Coarse levels are pruned with the same center rule at their own scale
    (times a small safety factor), which is exact for unit-gradient fields
    and a close approximation for a trained one.
    """
    n = 2**tree.max_depth
    lo = tree.box.lo
    start_depth = min(3, tree.max_depth)
    cells = np.stack(np.meshgrid(*([np.arange(2**start_depth)] * 3), indexing="ij"), -1).reshape(-1, 3)
    chunk = 1 << 17  # bounds peak memory of the field query
    for depth in range(start_depth, tree.max_depth + 1):
        size = float(tree.box.extent[0]) / 2**depth
        centers = lo + (cells + 0.5) * size
        sdf = np.concatenate(
            [field.sdf(centers[i : i + chunk]) for i in range(0, centers.shape[0], chunk)]
        )
        diag_half = 0.5 * size * np.sqrt(3.0)
        slack = 1.0 if depth == tree.max_depth else 1.25
        keep = np.abs(sdf) <= band + slack * diag_half
        cells = cells[keep]
        if cells.shape[0] == 0:
            break
        if depth < tree.max_depth:
            offsets = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), -1).reshape(-1, 3)
            cells = (cells[:, None, :] * 2 + offsets[None, :, :]).reshape(-1, 3)
    occ = np.zeros((n, n, n), dtype=bool)
    if cells.shape[0]:
        occ[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    return Octree(tree.box, tree.max_depth, occ)


# ---------------------------------------------------------------- sampling


@dataclass
class RaySamples:
    """Packed per-batch ray samples.

    `t` holds strictly increasing depths per ray; `ray_id` maps samples to
    rays; `far_cap` is the octree-box exit used for the last delta.
    """

    t: np.ndarray
    ray_id: np.ndarray
    num_rays: int
    far_cap: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.valid is None:
            self.valid = np.ones(self.t.shape[0], dtype=bool)

    @property
    def count(self) -> int:
        return int(self.t.shape[0])

    @property
    def points(self) -> np.ndarray:
        return self.origins[self.ray_id] + self.t[:, None] * self.dirs[self.ray_id]

    def counts_per_ray(self) -> np.ndarray:
        return np.bincount(self.ray_id, minlength=self.num_rays)

    def deltas(self) -> np.ndarray:
        """d_{i+1} - d_i within each ray; the last sample uses the far cap."""
        if self.count == 0:
            return np.zeros(0)
        d = np.empty_like(self.t)
        same_ray = np.zeros(self.count, dtype=bool)
        same_ray[:-1] = self.ray_id[1:] == self.ray_id[:-1]
        d[same_ray] = np.diff(self.t)[same_ray[:-1]]
        last = ~same_ray
        d[last] = np.maximum(self.far_cap[self.ray_id[last]] - self.t[last], 1e-9)
        return d

    def last_of_ray(self) -> np.ndarray:
        """Mask of samples that are the last of their ray."""
        m = np.ones(self.count, dtype=bool)
        m[:-1] = self.ray_id[1:] != self.ray_id[:-1]
        return m

    def subset(self, keep: np.ndarray) -> "RaySamples":
        return RaySamples(
            t=self.t[keep],
            ray_id=self.ray_id[keep],
            num_rays=self.num_rays,
            far_cap=self.far_cap,
            origins=self.origins,
            dirs=self.dirs,
        )


def _ray_box_span(box: Box, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box.lo - origins) / dirs
        t2 = (box.hi - origins) / dirs
    t_lo = np.where(np.abs(dirs) < 1e-300, -np.inf, np.minimum(t1, t2))
    t_hi = np.where(np.abs(dirs) < 1e-300, np.inf, np.maximum(t1, t2))
    return t_lo.max(axis=-1), t_hi.min(axis=-1)


def traverse(tree: Octree, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Occupied-leaf intervals along each ray, in traversal order.

    Returns (ray index, t_enter, t_exit) packed over all hits plus the
    per-ray box exit depth. Rays that miss the box get no intervals and a
    zero far cap.
    """
    origins = np.atleast_2d(origins).astype(np.float64)
    dirs = np.atleast_2d(dirs).astype(np.float64)
    r = origins.shape[0]
    n = 2**tree.max_depth
    leaf = tree.leaf_size
    lo = tree.box.lo

    t_near, t_far = _ray_box_span(tree.box, origins, dirs)
    t_near = np.maximum(t_near, 0.0)
    active = t_far > t_near + 1e-12
    far_cap = np.where(active, t_far, 0.0)

    entry = origins + (t_near[:, None] + 1e-9) * dirs
    idx = np.clip(np.floor((entry - lo) / leaf).astype(np.int64), 0, n - 1)
    step = np.where(dirs > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(np.abs(dirs) < 1e-300, np.inf, leaf / np.abs(dirs))
        boundary = lo + (idx + (step > 0)) * leaf
        t_max = np.where(np.abs(dirs) < 1e-300, np.inf, (boundary - origins) / dirs)

    t_enter = t_near.copy()
    hits_ray, hits_in, hits_out = [], [], []
    while np.any(active):
        act = np.flatnonzero(active)
        ii = idx[act]
        occ = tree.occupancy[ii[:, 0], ii[:, 1], ii[:, 2]]
        t_exit = t_max[act].min(axis=-1)
        rec = occ & (t_exit > t_enter[act] + 1e-12)
        if np.any(rec):
            hits_ray.append(act[rec])
            hits_in.append(t_enter[act][rec])
            hits_out.append(np.minimum(t_exit[rec], t_far[act][rec]))
        axis = np.argmin(t_max[act], axis=-1)
        t_enter[act] = t_exit
        idx[act, axis] += step[act, axis]
        t_max[act, axis] += t_delta[act, axis]
        done = (idx[act, axis] < 0) | (idx[act, axis] >= n) | (t_enter[act] >= t_far[act] - 1e-12)
        active[act[done]] = False

    if hits_ray:
        ray = np.concatenate(hits_ray)
        t_in = np.concatenate(hits_in)
        t_out = np.concatenate(hits_out)
        order = np.lexsort((t_in, ray))
        return ray[order], t_in[order], t_out[order], far_cap
    return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), far_cap


def sample_rays(
    tree: Octree,
    origins: np.ndarray,
    dirs: np.ndarray,
    samples_per_voxel: int,
    rng: np.random.Generator,
) -> RaySamples:
    """Stratified-uniform depths inside every occupied leaf interval."""
    if samples_per_voxel < 1:
        raise ValueError("need at least one sample per voxel")
    origins = np.atleast_2d(origins).astype(np.float64)
    dirs = np.atleast_2d(dirs).astype(np.float64)
    ray, t_in, t_out, far_cap = traverse(tree, origins, dirs)
    keep = t_out - t_in > 1e-12
    ray, t_in, t_out = ray[keep], t_in[keep], t_out[keep]
    m = ray.shape[0]
    nv = samples_per_voxel
    u = rng.uniform(size=(m, nv))
    frac = (np.arange(nv) + u) / nv
    depths = t_in[:, None] + (t_out - t_in)[:, None] * frac
    return RaySamples(
        t=depths.ravel(),
        ray_id=np.repeat(ray, nv),
        num_rays=origins.shape[0],
        far_cap=far_cap,
        origins=origins,
        dirs=dirs,
    )


def sample_ray(ray: Ray, tree: Octree, samples_per_voxel: int, seed: int) -> RaySamples:
    """Single-ray wrapper over the batched sampler."""
    rng = np.random.default_rng(seed)
    return sample_rays(tree, ray.origin[None], ray.direction[None], samples_per_voxel, rng)


def cull_samples(samples: RaySamples, field, threshold: float) -> RaySamples:
    """Drop samples whose SDF exceeds the threshold; order is preserved."""
    if samples.count == 0:
        return samples
    if np.isinf(threshold):
        return samples
    sdf = field.sdf(samples.points)
    return samples.subset(sdf <= threshold)


# ----------------------------------------------------------- distant shells


@dataclass
class ShellSamples:
    shell_index: np.ndarray
    x_warped: np.ndarray
    scales: np.ndarray
    t: np.ndarray


def shell_scale(i, n: int, r_max: float):
    """r_i = 1 / ((1 - i/n) + (i/n) / r_max); uniform in inverse scale."""
    frac = np.asarray(i, dtype=np.float64) / n
    return 1.0 / ((1.0 - frac) + frac / r_max)


def inverse_cuboid_warp(x: np.ndarray, i: int, n: int, r_max: float) -> tuple[np.ndarray, float]:
    """Lift a unit-shell point to the 4-vector (r_i * x, r_i)."""
    if not 0 <= i <= n:
        raise InvalidShellIndex(f"shell index {i} outside [0, {n}]")
    if r_max <= 1:
        raise ValueError("r_max must exceed 1")
    r = float(shell_scale(i, n, r_max))
    x = np.asarray(x, dtype=np.float64)
    tail = np.full(x.shape[:-1] + (1,), r)
    return np.concatenate([r * x, tail], axis=-1), r


def sample_distant_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    close_box: Box,
    n: int,
    r_max: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One sample per shell i = 1..n for each ray.

    Returns (x_warped (R, n, 4), shell depths t (R, n), scales (n,)). The
    shell of scale r_i is the close-range box inflated r_i times about its
    center; the warp input is the hit point scaled back onto the unit shell.
    """
    origins = np.atleast_2d(origins).astype(np.float64)
    dirs = np.atleast_2d(dirs).astype(np.float64)
    c = close_box.center
    h = 0.5 * close_box.extent
    scales = shell_scale(np.arange(1, n + 1), n, r_max)

    oc = origins - c
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / dirs
    t_all = np.empty((origins.shape[0], n))
    for k, r in enumerate(scales):
        t1 = (-r * h - oc) * inv_d
        t2 = (r * h - oc) * inv_d
        t_hi = np.where(np.abs(dirs) < 1e-300, np.inf, np.maximum(t1, t2))
        t_all[:, k] = t_hi.min(axis=-1)
    if np.any(~np.isfinite(t_all)) or np.any(t_all <= 0):
        raise RayInsideBoxOnly("ray never exits a cuboid shell in the forward direction")

    pts = origins[:, None, :] + t_all[..., None] * dirs[:, None, :]
    unit = (pts - c) / (h * scales[None, :, None])
    x_warped = np.concatenate(
        [unit * scales[None, :, None], np.broadcast_to(scales, t_all.shape)[..., None]], axis=-1
    )
    return x_warped, t_all, scales


def sample_distant(ray: Ray, close_box: Box, n: int, r_max: float) -> ShellSamples:
    x_warped, t, scales = sample_distant_batch(ray.origin[None], ray.direction[None], close_box, n, r_max)
    return ShellSamples(
        shell_index=np.arange(1, n + 1),
        x_warped=x_warped[0],
        scales=scales,
        t=t[0],
    )
