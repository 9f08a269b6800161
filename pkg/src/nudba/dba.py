"""Joint map/pose optimization driver.

Initialization triangulates flow correspondences, fits the dominant plane,
pretrains the SDF toward it, and seeds the sampling octree from the point
cloud. The main loop draws rays uniformly over (frame pair, valid pixel),
renders flow/disparity (and optionally color) through the tape, and applies
Adam to the field always and to the pose deltas once warm-up has passed.

Ray sampling is detached: depths come from the current effective poses but
carry no gradient; pose gradients flow only through the reprojection of
sample points into the target frame. Pairs j -> j+1 make every non-gauge
frame the target of exactly one pair, so all of them receive updates while
frame 0 (the gauge) is held fixed.

All per-iteration randomness comes from a generator seeded with
(config.seed, iteration); with NUDBA_THREADS unset the loop is strictly
serial and bitwise reproducible.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, fields as dc_fields, replace

import numpy as np
from scipy import ndimage
from skimage import measure

from . import autodiff as ad
from . import io as nio
from . import rendering as rend
from .autodiff import ParamStore, Tape
from .errors import (
    DivergedLoss,
    EmptyField,
    InsufficientCorrespondences,
    NonFiniteGradient,
    NonFiniteTerm,
    ParseError,
)
from .field import ColorHead, DistantField, HashGridConfig, SdfField, init_to_plane
from .geometry import (
    Box, Frame, Plane, SE3Pose, cast_rays, pose_matrices_tape, project_many,
    ransac_plane, triangulate_many,
)
from .losses import LossConfig, LossReport, _safe_norm, total_loss, weighted_total
from .rendering import RenderConfig
from .sampling import Octree, RaySamples, build_octree, cull_samples, sample_distant_batch, sample_rays, update_octree


# ------------------------------------------------------------ configuration


@dataclass
class DbaConfig:
    total_iterations: int = 20000
    rays_per_iteration: int = 8192
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    lr_sharpness: float = 1e-3
    lr_pose: float = 1e-4
    pose_opt_start_iteration: int = 1000
    cull_start_fraction: float = 0.6
    cull_threshold_leaves: float = 2.0
    octree_update_interval: int = 500
    checkpoint_interval: int = 1000
    log_interval: int = 100
    seed: int = 0
    samples_per_voxel: int = 2
    band: float = 0.15
    octree_depth: int = 7
    grid_levels: int = 8
    grid_base_resolution: int = 16
    grid_per_level_scale: float = 1.5
    grid_table_log2: int = 17
    feature_dim: int = 15
    decoder_hidden: int = 64
    decoder_layers: int = 2
    distant_levels: int = 4
    distant_base_resolution: int = 8
    distant_table_log2: int = 15
    eikonal_points: int = 512
    uniform_fraction: float = 0.25
    init_stride: int = 8
    init_min_parallax: float = 1e-3
    init_ransac_threshold: float = 0.05
    init_ransac_iterations: int = 256
    init_plane_steps: int = 400
    loss: LossConfig = dc_field(default_factory=LossConfig)
    render: RenderConfig = dc_field(default_factory=lambda: RenderConfig(far_cap=14.0))

    def __post_init__(self) -> None:
        if self.total_iterations < 0 or self.rays_per_iteration < 1:
            raise ValueError("need total_iterations >= 0 and at least one ray")
        if not 0.0 <= self.cull_start_fraction <= 1.0:
            raise ValueError("cull_start_fraction outside [0, 1]")
        if min(self.octree_update_interval, self.checkpoint_interval, self.log_interval) < 1:
            raise ValueError("intervals must be >= 1")
        if self.band <= 0 or self.octree_depth < 2:
            raise ValueError("need positive band and octree depth >= 2")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "DbaConfig":
        """Build from flat string options (the [optimize] section of a run
        config); keys may name DbaConfig or LossConfig fields."""
        cfg_types = {f.name: f.type for f in dc_fields(cls)}
        loss_kw, cfg_kw = {}, {}
        loss_types = {f.name: f.type for f in dc_fields(LossConfig)}
        for key, raw in mapping.items():
            if key in loss_types:
                loss_kw[key] = _coerce(key, raw, loss_types[key])
            elif key in cfg_types and key not in ("loss", "render"):
                cfg_kw[key] = _coerce(key, raw, cfg_types[key])
            elif key == "far_cap":
                cfg_kw.setdefault("_far_cap", _coerce(key, raw, "float"))
            else:
                raise ParseError(f"unknown optimize option {key!r}")
        far = cfg_kw.pop("_far_cap", None)
        cfg = cls(**cfg_kw, loss=LossConfig(**loss_kw))
        if far is not None:
            cfg.render = replace(cfg.render, far_cap=far)
        return cfg


def _coerce(key: str, raw: str, typ: str):
    typ = str(typ)
    try:
        if "bool" in typ:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(low)
        if "int" in typ:
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ParseError(f"bad value {raw!r} for option {key!r}") from exc


# ------------------------------------------------------------------ problem


@dataclass
class Problem:
    """One optimization instance: frames, dense observations, close box."""

    frames: list
    flows: dict
    disparities: dict | None
    images: dict | None
    region: Box
    max_t: float = 14.0
    gt_frames: list | None = None
    shells: int = 3
    r_max: float = 16.0

    def __post_init__(self) -> None:
        if len(self.frames) < 2:
            raise ValueError("need at least two frames")
        ids = {f.id for f in self.frames}
        intr = self.frames[0].intrinsics
        for f in self.frames:
            if (f.intrinsics.width, f.intrinsics.height) != (intr.width, intr.height):
                raise ValueError("frames must share image dimensions")
        if not self.flows:
            raise ValueError("need at least one flow map")
        for (j, k), (flow, valid) in self.flows.items():
            if j not in ids or k not in ids:
                raise ValueError(f"flow pair ({j}, {k}) references unknown frames")
            if flow.shape != (intr.height, intr.width, 2) or valid.shape != (intr.height, intr.width):
                raise ValueError(f"flow map ({j}, {k}) does not match intrinsics")
        for j, (disp, valid) in (self.disparities or {}).items():
            if j not in ids:
                raise ValueError(f"disparity map {j} references an unknown frame")
            if disp.shape != (intr.height, intr.width):
                raise ValueError(f"disparity map {j} does not match intrinsics")

    @classmethod
    def from_dataset(cls, ds) -> "Problem":
        return cls(
            frames=ds.frames,
            flows=ds.flows,
            disparities=ds.disparities or None,
            images=ds.images or None,
            region=ds.region,
            max_t=ds.max_t,
            gt_frames=ds.gt_frames,
            shells=ds.shells,
            r_max=ds.r_max,
        )


@dataclass
class TraceEntry:
    iteration: int
    report: LossReport
    ate: float | None
    wall_time: float

    def line(self) -> str:
        s = self.report.line(self.iteration)
        if self.ate is not None:
            s += f"  ate {self.ate:.6e}"
        return s + f"  wall {self.wall_time:.1f}s"


@dataclass
class OptimizationTrace:
    entries: list = dc_field(default_factory=list)

    def append(self, entry: TraceEntry) -> None:
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.entries.append(entry)

    def lines(self) -> list[str]:
        return [e.line() for e in self.entries]


# ------------------------------------------------------------ initialization


def road_surface_init(problem: Problem, config: DbaConfig):
    """Triangulate strided flow correspondences, RANSAC the dominant plane,
    pretrain the field toward it, and seed the octree from the survivors.

    Returns (plane, point cloud, octree, field). Points with parallax below
    config.init_min_parallax rad or outside 3x the close box are rejected.
    """
    frames = {f.id: f for f in problem.frames}
    intr = problem.frames[0].intrinsics
    wide = problem.region.scaled(3.0)
    clouds = []
    for (j, k) in sorted(problem.flows):
        flow, valid = problem.flows[(j, k)]
        vs, us = np.meshgrid(
            np.arange(0, intr.height, config.init_stride),
            np.arange(0, intr.width, config.init_stride),
            indexing="ij",
        )
        ok = valid[vs, us]
        p_j = np.stack([us[ok], vs[ok]], axis=-1).astype(np.float64)
        if p_j.shape[0] == 0:
            continue
        p_k = p_j + flow[vs[ok], us[ok]]
        pts, _, good = triangulate_many(p_j, p_k, frames[j], frames[k], min_angle=config.init_min_parallax)
        keep = good & wide.contains(pts)
        if np.any(keep):
            clouds.append(pts[keep])
    cloud = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    if cloud.shape[0] < 100:
        raise InsufficientCorrespondences(f"only {cloud.shape[0]} triangulated points survive filtering")

    plane, _ = ransac_plane(cloud, config.init_ransac_threshold, config.init_ransac_iterations, config.seed)
    cams = np.stack([f.effective_pose().translation for f in problem.frames])
    if np.mean(plane.signed_distance(cams)) < 0:
        plane = Plane(-plane.normal, -plane.offset)

    grid_cfg = HashGridConfig(
        box=problem.region.cube_hull(),
        levels=config.grid_levels,
        base_resolution=config.grid_base_resolution,
        per_level_scale=config.grid_per_level_scale,
        table_size_log2=config.grid_table_log2,
    )
    field = SdfField.create(
        grid_cfg,
        seed=config.seed,
        feature_dim=config.feature_dim,
        hidden=config.decoder_hidden,
        hidden_layers=config.decoder_layers,
    )
    if config.init_plane_steps > 0:
        init_to_plane(field, plane, problem.region, config.init_plane_steps, config.seed)
    tree = build_octree(cloud, problem.region, config.octree_depth)
    return plane, cloud, tree, field


# ---------------------------------------------------------------- run state


@dataclass
class _PairData:
    j: int
    k: int
    lin: np.ndarray
    flow: np.ndarray
    disp: np.ndarray | None
    disp_ok: np.ndarray | None
    img: np.ndarray | None


@dataclass
class RunState:
    problem: Problem
    config: DbaConfig
    field: SdfField
    distant: DistantField | None
    color: ColorHead | None
    store: ParamStore
    tree: Octree
    seed_tree: Octree
    frames: list
    base_r: np.ndarray
    base_t: np.ndarray
    pairs: list
    offsets: np.ndarray
    adam: ad.AdamState
    meta: dict
    disp_on: bool
    photo_on: bool
    threads: int

    @property
    def intr(self):
        return self.frames[0].intrinsics


def _copy_frames(frames) -> list:
    return [
        Frame(f.id, f.intrinsics, SE3Pose(f.pose.quaternion.copy(), f.pose.translation.copy()), f.pose_delta.copy())
        for f in frames
    ]


def prepare(problem: Problem, config: DbaConfig, init=None) -> RunState:
    """Build the mutable optimization state; `init` may pass a precomputed
    road_surface_init result to avoid repeating it."""
    if init is None:
        init = road_surface_init(problem, config)
    _, _, tree, field = init
    store = field.store
    frames = _copy_frames(sorted(problem.frames, key=lambda f: f.id))
    deltas = np.stack([f.pose_delta for f in frames])
    if "pose_deltas" in store.names():
        store.set("pose_deltas", deltas)
    else:
        store.add("pose_deltas", deltas, "pose")

    disp_on = (
        config.loss.use_disparity
        and config.render.use_stereo
        and bool(problem.disparities)
        and frames[0].intrinsics.baseline is not None
    )
    photo_on = config.loss.use_photometric and config.render.use_color and bool(problem.images)
    distant = color = None
    if photo_on:
        r = problem.r_max
        dist_cfg = HashGridConfig(
            box=(np.array([-r, -r, -r, 1.0]), np.array([r, r, r, r])),
            levels=config.distant_levels,
            base_resolution=config.distant_base_resolution,
            per_level_scale=2.0,
            table_size_log2=config.distant_table_log2,
            dims=4,
        )
        if any(n.startswith("distant.") for n in store.names()):
            distant = DistantField(dist_cfg, store)
            color = ColorHead(store, feature_dim=config.feature_dim)
        else:
            distant = DistantField.create(dist_cfg, config.seed + 1, store)
            color = ColorHead.create(config.seed + 2, store, feature_dim=config.feature_dim)

    id_to_index = {f.id: i for i, f in enumerate(frames)}
    pairs = []
    for (j, k) in sorted(problem.flows):
        flow, valid = problem.flows[(j, k)]
        lin = np.flatnonzero(np.asarray(valid).ravel())
        disp = disp_ok = img = None
        if disp_on and problem.disparities and j in problem.disparities:
            dmap, dvalid = problem.disparities[j]
            disp = dmap.ravel()[lin]
            disp_ok = np.asarray(dvalid).ravel()[lin]
        if photo_on:
            img = problem.images[j].reshape(-1, 3)[lin]
        pairs.append(_PairData(id_to_index[j], id_to_index[k], lin, flow.reshape(-1, 2)[lin], disp, disp_ok, img))
    counts = np.array([p.lin.size for p in pairs])
    if counts.sum() == 0:
        raise InsufficientCorrespondences("no valid flow pixels in any pair")
    offsets = np.concatenate([[0], np.cumsum(counts)])

    adam = ad.AdamState.for_store(
        store,
        {"grid": config.lr_grid, "decoder": config.lr_decoder, "sharpness": config.lr_sharpness, "pose": 0.0},
    )
    meta = _checkpoint_meta(problem, config, frames, photo_on)
    return RunState(
        problem=problem,
        config=config,
        field=field,
        distant=distant,
        color=color,
        store=store,
        tree=tree,
        seed_tree=tree.dilated(1),
        frames=frames,
        base_r=np.stack([f.pose.rotation_matrix() for f in frames]),
        base_t=np.stack([f.pose.translation for f in frames]),
        pairs=pairs,
        offsets=offsets,
        adam=adam,
        meta=meta,
        disp_on=disp_on,
        photo_on=photo_on,
        threads=max(1, int(os.environ.get("NUDBA_THREADS", "1"))),
    )


def _checkpoint_meta(problem: Problem, config: DbaConfig, frames, photo_on: bool) -> dict:
    cube = problem.region.cube_hull()
    return {
        "kind": "nudba-checkpoint",
        "box_lo": cube.lo.tolist(),
        "box_hi": cube.hi.tolist(),
        "region_lo": problem.region.lo.tolist(),
        "region_hi": problem.region.hi.tolist(),
        "grid_levels": config.grid_levels,
        "grid_base_resolution": config.grid_base_resolution,
        "grid_per_level_scale": config.grid_per_level_scale,
        "grid_table_log2": config.grid_table_log2,
        "feature_dim": config.feature_dim,
        "decoder_hidden": config.decoder_hidden,
        "decoder_layers": config.decoder_layers,
        "octree_depth": config.octree_depth,
        "band": config.band,
        "shells": problem.shells,
        "r_max": problem.r_max,
        "use_photometric": bool(photo_on),
        "distant_levels": config.distant_levels,
        "distant_base_resolution": config.distant_base_resolution,
        "distant_table_log2": config.distant_table_log2,
        "frame_ids": [int(f.id) for f in frames],
    }


def rebuild_models(store: ParamStore, meta: dict):
    """Reconstruct (field, distant, color) around checkpoint parameters."""
    box = Box(np.asarray(meta["box_lo"]), np.asarray(meta["box_hi"]))
    grid_cfg = HashGridConfig(
        box=box,
        levels=int(meta["grid_levels"]),
        base_resolution=int(meta["grid_base_resolution"]),
        per_level_scale=float(meta["grid_per_level_scale"]),
        table_size_log2=int(meta["grid_table_log2"]),
    )
    field = SdfField(
        grid_cfg,
        store,
        feature_dim=int(meta["feature_dim"]),
        hidden=int(meta["decoder_hidden"]),
        hidden_layers=int(meta["decoder_layers"]),
    )
    distant = color = None
    if meta.get("use_photometric"):
        r = float(meta["r_max"])
        dist_cfg = HashGridConfig(
            box=(np.array([-r, -r, -r, 1.0]), np.array([r, r, r, r])),
            levels=int(meta["distant_levels"]),
            base_resolution=int(meta["distant_base_resolution"]),
            per_level_scale=2.0,
            table_size_log2=int(meta["distant_table_log2"]),
            dims=4,
        )
        distant = DistantField(dist_cfg, store)
        color = ColorHead(store, feature_dim=int(meta["feature_dim"]))
    return field, distant, color


def occupancy_from_field(field: SdfField, box: Box, depth: int, band: float) -> Octree:
    """Field-band occupancy built from scratch over `box` (no seed points)."""
    n = 2**depth
    empty = Octree(box.cube_hull(), depth, np.zeros((n, n, n), dtype=bool))
    return update_octree(empty, field, band)


# ----------------------------------------------------------- ray batch draw


@dataclass
class _Batch:
    pix: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    target: np.ndarray
    flow_t: np.ndarray
    disp_t: np.ndarray
    disp_ok: np.ndarray
    fxb: np.ndarray
    img_t: np.ndarray | None


def _draw_batch(state: RunState, rng: np.random.Generator) -> _Batch:
    cfg = state.config
    intr = state.intr
    r = cfg.rays_per_iteration
    sel = rng.integers(0, state.offsets[-1], size=r)
    pair_of = np.searchsorted(state.offsets[1:], sel, side="right")
    within = sel - state.offsets[pair_of]

    pix = np.empty((r, 2))
    origins = np.empty((r, 3))
    dirs = np.empty((r, 3))
    target = np.empty(r, dtype=np.int64)
    flow_t = np.empty((r, 2))
    disp_t = np.zeros(r)
    disp_ok = np.zeros(r, dtype=bool)
    fxb = np.zeros(r)
    img_t = np.empty((r, 3)) if state.photo_on else None
    for pi, pd in enumerate(state.pairs):
        m = pair_of == pi
        if not np.any(m):
            continue
        lin = pd.lin[within[m]]
        p = np.stack([(lin % intr.width).astype(np.float64), (lin // intr.width).astype(np.float64)], axis=-1)
        o, d = cast_rays(state.frames[pd.j], p)
        pix[m] = p
        origins[m] = o
        dirs[m] = d
        target[m] = pd.k
        flow_t[m] = pd.flow[within[m]]
        if pd.disp is not None:
            disp_t[m] = pd.disp[within[m]]
            disp_ok[m] = pd.disp_ok[within[m]]
            fwd = state.frames[pd.j].effective_pose().rotation_matrix()[:, 2]
            fxb[m] = intr.fx * intr.baseline / np.maximum(d @ fwd, 1e-6)
        if img_t is not None:
            img_t[m] = pd.img[within[m]]
    return _Batch(pix, origins, dirs, target, flow_t, disp_t, disp_ok, fxb, img_t)


def _take_rays(samples: RaySamples, sel: np.ndarray) -> tuple[RaySamples, np.ndarray]:
    """Restrict to a contiguous ray-index chunk, renumbering ray ids."""
    ray_new = np.full(samples.num_rays, -1, dtype=np.int64)
    ray_new[sel] = np.arange(sel.size)
    mapped = ray_new[samples.ray_id]
    keep = mapped >= 0
    sub = RaySamples(
        t=samples.t[keep],
        ray_id=mapped[keep],
        num_rays=sel.size,
        far_cap=samples.far_cap[sel],
        origins=samples.origins[sel],
        dirs=samples.dirs[sel],
    )
    return sub, keep


# ------------------------------------------------------------ one iteration


def _pose_lr(config: DbaConfig, iteration: int) -> float:
    if config.lr_pose <= 0 or iteration < config.pose_opt_start_iteration:
        return 0.0
    span = max(config.total_iterations - config.pose_opt_start_iteration, 1)
    q = (iteration - config.pose_opt_start_iteration) / span
    return config.lr_pose * 0.5 * (1.0 + np.cos(np.pi * q))


def _sync_frames(state: RunState) -> None:
    deltas = state.store["pose_deltas"]
    for i, f in enumerate(state.frames):
        f.pose_delta = deltas[i].copy()


def _entropy_sum(opac, rows: np.ndarray):
    x = ad.clamp(ad.gather(opac, rows), 1e-6, 1.0 - 1e-6)
    return ad.vsum(-(x * ad.log(x) + (1.0 - x) * ad.log(1.0 - x)))


def _shard_forward(state, batch, samples, sel, counts, pose_on, eik_pts, uni_pts, shell_x, shell_t):
    """Forward + backward over one contiguous ray chunk.

    Every data term is accumulated as a sum divided by the batch-global
    count, so shard results add up to the full-batch means exactly.
    """
    cfg = state.config
    if sel is None:
        sub, pix, tgt = samples, batch.pix, batch.target
        flow_t, disp_t, disp_ok, fxb = batch.flow_t, batch.disp_t, batch.disp_ok, batch.fxb
        img_t = batch.img_t
    else:
        sub, _ = _take_rays(samples, sel)
        pix, tgt = batch.pix[sel], batch.target[sel]
        flow_t, disp_t, disp_ok, fxb = batch.flow_t[sel], batch.disp_t[sel], batch.disp_ok[sel], batch.fxb[sel]
        img_t = batch.img_t[sel] if batch.img_t is not None else None
        if shell_x is not None:
            shell_x, shell_t = shell_x[sel], shell_t[sel]

    tape = Tape()
    terms = {}
    has = sub.counts_per_ray() > 0
    rows = np.flatnonzero(has)
    if sub.count:
        sdf, feat = state.field.sdf_and_feature(sub.points, tape)
        sharp = state.field.sharpness(tape)
        alpha = rend.sdf_to_alpha_packed(sdf, sub, sharp)
        w = rend.composite_packed(alpha, sub)
    else:
        sdf = feat = None
        w = np.zeros(0)

    if pose_on:
        delta_var = tape.param(state.store, "pose_deltas")
        r_eff, t_eff = pose_matrices_tape(delta_var, state.base_r, state.base_t)
    else:
        poses = [f.effective_pose() for f in state.frames]
        r_eff = np.stack([p.rotation_matrix() for p in poses])
        t_eff = np.stack([p.translation for p in poses])

    if counts["flow"] and rows.size:
        flow = rend.render_flow_batch(sub, w, pix, tgt, r_eff, t_eff, state.intr)
        res = ad.gather(flow, rows) - flow_t[rows]
        terms["flow"] = ad.vsum(_safe_norm(res, axis=1)) / counts["flow"]

    if counts.get("disparity") and sub.count:
        drows = np.flatnonzero(has & disp_ok)
        if drows.size:
            pred = rend.render_disparity_batch(sub, w, fxb)
            dres = ad.gather(pred, drows) - disp_t[drows]
            terms["disparity"] = ad.vsum(ad.absolute(dres)) / counts["disparity"]

    if counts["eikonal"] and eik_pts.shape[0]:
        g = state.field.gradient(eik_pts, tape)
        dev = ad.sqrt(ad.vsum(g * g, axis=1) + 1e-18) - 1.0
        terms["eikonal"] = ad.vsum(dev * dev) / counts["eikonal"]

    if counts["sparsity"]:
        spa = ad.vsum(ad.exp(-(cfg.loss.tau * ad.absolute(sdf)))) if sub.count else 0.0
        if uni_pts.shape[0]:
            u_sdf, _ = state.field.sdf_and_feature(uni_pts, tape)
            spa = spa + ad.vsum(ad.exp(-(cfg.loss.tau * ad.absolute(u_sdf))))
        if not isinstance(spa, float):
            terms["sparsity"] = spa / counts["sparsity"]

    if counts["entropy"] and rows.size:
        opac = ad.segment_sum(w, sub.ray_id, sub.num_rays)
        terms["entropy"] = _entropy_sum(opac, rows) / counts["entropy"]

    if counts.get("photometric"):
        vdirs = sub.dirs[sub.ray_id]
        color = rend.render_color_batch(
            sub, w, vdirs, feat, shell_x, shell_t, state.color, state.distant, tape
        )
        terms["photometric"] = ad.vsum(_safe_norm(color - img_t, axis=1)) / counts["photometric"]

    total = weighted_total(terms, cfg.loss)
    grads = ad.backward(tape, total)
    values = {name: float(ad.value_of(t)) for name, t in terms.items()}
    return values, grads


def run_iteration(state: RunState, iteration: int, apply_update: bool = True) -> LossReport:
    """One full optimization step; with apply_update=False it only evaluates
    (same batch, same loss, no parameter movement)."""
    cfg = state.config
    _sync_frames(state)
    rng = np.random.default_rng((cfg.seed, iteration))
    batch = _draw_batch(state, rng)
    samples = sample_rays(state.tree, batch.origins, batch.dirs, cfg.samples_per_voxel, rng)
    if cfg.total_iterations and iteration >= cfg.cull_start_fraction * cfg.total_iterations:
        samples = cull_samples(samples, state.field, cfg.cull_threshold_leaves * state.tree.leaf_size)

    n_sub = min(cfg.eikonal_points, samples.count)
    if 0 < n_sub < samples.count:
        sub_idx = rng.choice(samples.count, size=n_sub, replace=False)
    else:
        sub_idx = np.arange(samples.count)
    n_uni = int(np.ceil(cfg.uniform_fraction * max(n_sub, 1)))
    uni_pts = state.problem.region.sample_uniform(n_uni, rng)
    eik_pts = np.concatenate([samples.points[sub_idx], uni_pts])

    shell_x = shell_t = None
    if state.photo_on:
        shell_x, shell_t, _ = sample_distant_batch(
            batch.origins, batch.dirs, state.problem.region, state.problem.shells, state.problem.r_max
        )

    has = samples.counts_per_ray() > 0
    counts = {
        "flow": int(has.sum()),
        "eikonal": int(eik_pts.shape[0]),
        "sparsity": int(samples.count + n_uni),
        "entropy": int(has.sum()),
    }
    if state.disp_on:
        counts["disparity"] = int((has & batch.disp_ok).sum())
    if state.photo_on:
        counts["photometric"] = cfg.rays_per_iteration

    pose_on = _pose_lr(cfg, iteration) > 0.0
    if state.threads > 1:
        chunks = np.array_split(np.arange(cfg.rays_per_iteration), state.threads)
        eik_chunks = np.array_split(eik_pts, state.threads)
        uni_chunks = np.array_split(uni_pts, state.threads)
        with ThreadPoolExecutor(max_workers=state.threads) as pool:
            parts = list(
                pool.map(
                    lambda args: _shard_forward(state, batch, samples, *args),
                    [
                        (chunks[i], counts, pose_on, eik_chunks[i], uni_chunks[i], shell_x, shell_t)
                        for i in range(state.threads)
                    ],
                )
            )
        values = {}
        for vals, _ in parts:
            for name, v in vals.items():
                values[name] = values.get(name, 0.0) + v
        grads = ad.merge_gradients([g for _, g in parts])
    else:
        values, grads = _shard_forward(state, batch, samples, None, counts, pose_on, eik_pts, uni_pts, shell_x, shell_t)

    report = total_loss(values, cfg.loss, counts)
    if apply_update:
        if "pose_deltas" in grads:
            grads["pose_deltas"][0, :] = 0.0
        state.adam.learning_rates["pose"] = _pose_lr(cfg, iteration)
        ad.adam_step(state.store, grads, state.adam)
    return report


# ----------------------------------------------------------------- optimize


def _visible_leaves(tree: Octree, frames, max_t: float, dilate: int = 2) -> np.ndarray:
    """Boolean leaf mask of the union of all camera frusta, slightly dilated.

    The field is only supervised where rays actually go; occupancy that the
    SDF refresh invents outside every frustum would attract samples without
    any data term to correct them, so the driver prunes it.
    """
    n = 2**tree.max_depth
    step = tree.leaf_size
    axes = [tree.box.lo[d] + (np.arange(n) + 0.5) * step for d in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    seen = np.zeros(centers.shape[0], dtype=bool)
    chunk = 1 << 18
    for i in range(0, centers.shape[0], chunk):
        pts = centers[i : i + chunk]
        hit = np.zeros(pts.shape[0], dtype=bool)
        for f in frames:
            pix, depth, ok = project_many(pts, f)
            k = f.intrinsics
            inb = (pix[:, 0] >= -0.5) & (pix[:, 0] <= k.width - 0.5)
            inb &= (pix[:, 1] >= -0.5) & (pix[:, 1] <= k.height - 0.5)
            hit |= ok & inb & (depth <= max_t)
        seen[i : i + chunk] = hit
    mask = seen.reshape(n, n, n)
    if dilate:
        mask = ndimage.binary_dilation(mask, iterations=dilate)
    return mask


def _refresh_tree(state: RunState, problem: Problem, config: DbaConfig) -> Octree:
    """Re-derive occupancy from the current SDF, constrained to evidence.

    The raw band re-marking would also pick up spurious near-zero regions the
    data terms never see (hash collisions bleed updates into unsupervised
    space), so the result is intersected with the camera frusta and with a
    two-leaf dilation of the previous tree: occupancy may only shrink to the
    band or grow along its own fringe.
    """
    upd = update_octree(state.tree, state.field, config.band)
    vis = _visible_leaves(upd, state.frames, problem.max_t + 1.0)
    fringe = ndimage.binary_dilation(state.tree.occupancy, iterations=2)
    pruned = Octree(upd.box, upd.max_depth, upd.occupancy & vis & fringe)
    return pruned.union(state.seed_tree)


def optimize(problem: Problem, config: DbaConfig, init=None, out_dir: str | None = None,
             probe=None, probe_interval: int = 500):
    """Run the joint optimization; returns (field, frames, trace).

    Divergence (non-finite total or gradients) restores the last checkpoint
    snapshot and raises DivergedLoss. With out_dir set, a rolling checkpoint
    is written every config.checkpoint_interval iterations. `probe(state, it)`
    is a read-only diagnostics hook called every probe_interval iterations
    (and after the last); it must not mutate parameters.
    """
    state = prepare(problem, config, init)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    trace = OptimizationTrace()
    snapshot = state.store.copy()
    start = time.perf_counter()
    for it in range(config.total_iterations):
        if it > 0 and it % config.octree_update_interval == 0:
            state.tree = _refresh_tree(state, problem, config)
        if probe is not None and it % probe_interval == 0:
            probe(state, it)
        try:
            report = run_iteration(state, it)
        except (NonFiniteTerm, NonFiniteGradient) as exc:
            for name in snapshot.names():
                state.store[name][...] = snapshot[name]
            _sync_frames(state)
            raise DivergedLoss(f"iteration {it}: {exc}") from exc
        if it % config.log_interval == 0 or it == config.total_iterations - 1:
            ate_now = None
            if problem.gt_frames is not None:
                _sync_frames(state)
                ate_now = nio.ate(state.frames, problem.gt_frames)
            trace.append(TraceEntry(it, report, ate_now, time.perf_counter() - start))
        if (it + 1) % config.checkpoint_interval == 0:
            snapshot = state.store.copy()
            if out_dir is not None:
                nio.write_checkpoint(os.path.join(out_dir, "checkpoint.nuck"), state.store, state.meta)
    _sync_frames(state)
    if probe is not None:
        probe(state, config.total_iterations)
    if out_dir is not None:
        nio.write_checkpoint(os.path.join(out_dir, "checkpoint.nuck"), state.store, state.meta)
    return state.field, state.frames, trace


# -------------------------------------------------------------------- mesh


def extract_mesh(field: SdfField, tree: Octree, resolution: int):
    """Marching cubes over the octree-occupied region of the field.

    The SDF is evaluated on an (R+1)^3 lattice over the octree cube but only
    at vertices near occupancy; cells outside the dilated band are masked
    out of the triangulation. Normals follow the field gradient (toward
    positive sdf) and faces are wound to match.
    """
    if resolution < 8:
        raise ValueError("mesh resolution must be at least 8")
    if not tree.occupancy.any():
        raise EmptyField("octree marks no occupied region")
    n = int(resolution)
    cube = tree.box
    cell = float(cube.extent[0]) / n
    dil = tree.dilated(max(1, int(np.ceil(cell / tree.leaf_size)) + 1))

    axes = [cube.lo[a] + np.arange(n + 1) * (cube.extent[a] / n) for a in range(3)]
    volume = np.full((n + 1, n + 1, n + 1), tree.leaf_size)
    mask = np.zeros((n + 1, n + 1, n + 1), dtype=bool)
    yy, zz = np.meshgrid(axes[1], axes[2], indexing="ij")
    for ix in range(n + 1):
        pts = np.stack([np.full(yy.size, axes[0][ix]), yy.ravel(), zz.ravel()], axis=-1)
        occ = dil.occupied_at(pts)
        mask[ix] = occ.reshape(n + 1, n + 1)
        if np.any(occ):
            volume[ix].ravel()[occ] = field.sdf(pts[occ])

    try:
        verts, faces, normals, _ = measure.marching_cubes(
            volume, level=0.0, spacing=(cell, cell, cell), gradient_direction="ascent", mask=mask
        )
    except (ValueError, RuntimeError) as exc:
        raise EmptyField(f"no zero crossing inside the occupied region: {exc}") from exc
    if verts.shape[0] == 0:
        raise EmptyField("no zero crossing inside the occupied region")
    verts = verts + cube.lo

    # orient normals toward +sdf using the field gradient at a vertex probe
    step = max(1, verts.shape[0] // 64)
    g = field.gradient(verts[::step])
    agree = np.sum(np.sum(np.asarray(g) * normals[::step], axis=1))
    if agree < 0:
        normals = -normals
        faces = faces[:, ::-1]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(norms, 1e-12)
    return nio.Mesh(vertices=verts, faces=np.ascontiguousarray(faces), normals=normals)


# ---------------------------------------------------------- rendering maps


def render_maps(field: SdfField, tree: Octree, frame: Frame, samples_per_voxel: int = 2,
                color_head=None, distant=None, shells: int = 3, r_max: float = 16.0,
                region: Box | None = None, seed: int = 0, chunk: int = 2048):
    """Full-frame depth/opacity (and color when models are given) maps."""
    intr = frame.intrinsics
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height), indexing="xy")
    pixels = np.stack([us.ravel(), vs.ravel()], axis=-1).astype(np.float64)
    depth = np.zeros(pixels.shape[0])
    opacity = np.zeros(pixels.shape[0])
    rgb = np.zeros((pixels.shape[0], 3)) if color_head is not None else None
    if rgb is not None and region is None:
        raise ValueError("color rendering needs the close-range region box")
    rng = np.random.default_rng((seed, frame.id))
    for lo in range(0, pixels.shape[0], chunk):
        hi = min(lo + chunk, pixels.shape[0])
        origin, dirs = cast_rays(frame, pixels[lo:hi])
        origins = np.broadcast_to(origin, dirs.shape)
        samples = sample_rays(tree, origins, dirs, samples_per_voxel, rng)
        sdf, feat = field.sdf_and_feature(samples.points)
        sharp = field.sharpness()
        alpha = rend.sdf_to_alpha_packed(sdf, samples, sharp)
        w = rend.composite_packed(alpha, samples)
        depth[lo:hi] = rend.render_depth_batch(samples, w)
        opacity[lo:hi] = rend.render_opacity_batch(samples, w)
        if rgb is not None:
            shell_x, shell_t, _ = sample_distant_batch(origins, dirs, region, shells, r_max)
            vdirs = samples.dirs[samples.ray_id]
            rgb[lo:hi] = rend.render_color_batch(
                samples, w, vdirs, feat, shell_x, shell_t, color_head, distant, None
            )
    h, wd = intr.height, intr.width
    out = {"depth": depth.reshape(h, wd), "opacity": opacity.reshape(h, wd)}
    if rgb is not None:
        out["color"] = np.clip(rgb, 0.0, 1.0).reshape(h, wd, 3)
    return out
