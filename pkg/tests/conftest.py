"""Shared fixtures and the acceptance-criteria summary hook.

Heavy artifacts (the synthetic dataset, a plane-pretrained field, the long
optimization runs) are session-scoped so the expensive setup happens once.
Acceptance tests register their verdicts in ACCEPTANCE_RESULTS; the terminal
summary prints one PASS/FAIL line per criterion at the end of the run.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np
import pytest

from nudba import dba, synth
from nudba.autodiff import ParamStore
from nudba.field import HashGridConfig, SdfField, init_to_plane
from nudba.geometry import Box, Plane

# ------------------------------------------------------- acceptance summary

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}

CRITERIA = {
    1: "gradient correctness vs finite differences (< 1e-4 relative)",
    2: "rendering invariants on 10k random rays",
    3: "formula goldens (shell scale, entropy, disparity, homography)",
    4: "mapping-only convergence: depth error and mesh quality",
    5: "joint pose+map optimization shrinks trajectory error",
    6: "photometric term does not improve accuracy under biased albedo",
    7: "road-surface initialization: plane recovery and pretrain fit",
    8: "serial determinism of the synth -> optimize -> eval pipeline",
    9: "oracle equivalence: traversal, triangulation, trajectory error",
}


@contextlib.contextmanager
def acceptance(n: int, detail: str = ""):
    """Record PASS/FAIL for criterion `n` around the guarded block."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_RESULTS[n] = (CRITERIA[n], "FAIL", f"{type(exc).__name__}: {exc}")
        raise
    ACCEPTANCE_RESULTS[n] = (CRITERIA[n], "PASS", detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in ACCEPTANCE_RESULTS:
            label, status, detail = ACCEPTANCE_RESULTS[n]
            suffix = f" ({detail})" if detail else ""
            terminalreporter.write_line(f"ACCEPTANCE {n} {status} - {label}{suffix}")
        else:
            terminalreporter.write_line(f"ACCEPTANCE {n} NOT RUN - {CRITERIA[n]}")


# ----------------------------------------------------------- shared oracles


def ate_alignment_search(p: np.ndarray, q: np.ndarray, restarts: int = 4, seed: int = 0) -> float:
    """Numeric SE(3) alignment oracle: min position RMSE over rotvec + shift.

    Multi-restart derivative-free search; independent of the closed-form
    alignment it is used to validate.
    """
    from scipy.optimize import minimize
    from scipy.spatial.transform import Rotation

    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)

    def cost(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        res = p @ r.T + x[3:] - q
        return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))

    rng = np.random.default_rng(seed)
    best = np.inf
    for k in range(restarts):
        x0 = np.zeros(6)
        if k:
            x0 = np.concatenate([rng.normal(0.0, 0.1, 3), rng.normal(0.0, 0.2, 3)])
        for method in ("Powell", "Nelder-Mead"):
            out = minimize(cost, x0, method=method,
                           options={"xtol": 1e-12, "ftol": 1e-14} if method == "Powell"
                           else {"xatol": 1e-10, "fatol": 1e-14, "maxiter": 40000, "maxfev": 40000})
            best = min(best, float(out.fun))
            x0 = out.x
    return best


# ------------------------------------------------------------ tiny fixtures


@pytest.fixture(scope="session")
def dataset():
    """Default synthetic preset, exact poses, with images."""
    return synth.generate_dataset(seed=11, with_images=True)


@pytest.fixture(scope="session")
def plane_field():
    """Small field pretrained to the plane z = 0 over a 4-unit cube.

    Returns (field, plane, box, holdout_rmse); shared by field, sampling and
    rendering tests that need a roughly metric SDF.
    """
    box = Box(np.array([-2.0, -2.0, -2.0]), np.array([2.0, 2.0, 2.0]))
    cfg = HashGridConfig(
        box=box, levels=4, base_resolution=8, per_level_scale=1.5,
        table_size_log2=14, feature_dim=2,
    )
    field = SdfField.create(cfg, seed=5, hidden=32, hidden_layers=2)
    plane = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
    rmse = init_to_plane(field, plane, box, steps=1000, seed=5)
    return field, plane, box, rmse


# --------------------------------------------------- shared long-run setups

MAPPING_ITERATIONS = 5000
JOINT_ITERATIONS = 8000


def _acceptance_config(iterations: int, *, seed: int, lr_pose: float, use_photometric: bool = False,
                       render_color: bool = False) -> dba.DbaConfig:
    """Budget-tuned configuration for the long acceptance runs.

    Smaller ray batches and hash tables than the library defaults keep the
    runs inside the stated wall-clock targets on one desktop core; iteration
    counts are exactly the stated ones.
    """
    cfg = dba.DbaConfig(
        total_iterations=iterations,
        rays_per_iteration=256,
        seed=seed,
        lr_pose=lr_pose,
        pose_opt_start_iteration=min(1000, iterations // 4),
        octree_update_interval=500,
        checkpoint_interval=1000,
        log_interval=250,
        grid_levels=6,
        grid_table_log2=15,
        band=0.10,
        octree_depth=7,
        eikonal_points=256,
        init_plane_steps=400,
    )
    cfg.loss.use_photometric = use_photometric
    cfg.render.use_color = render_color
    return cfg


class DepthProbe:
    """Records mean |rendered depth - cast depth| on fixed probe rays."""

    def __init__(self, ds, count: int = 400):
        from nudba.geometry import cast_rays
        from nudba.synth import cast_many

        flow0, valid0 = ds.flows[(0, 1)]
        vv, uu = np.nonzero(valid0)
        pick = np.arange(0, vv.size, max(1, vv.size // count))
        pix = np.stack([uu[pick], vv[pick]], -1).astype(np.float64)
        origin, dirs = cast_rays(ds.frames_gt[0], pix)
        depth, hit, _ = cast_many(ds.scene, np.broadcast_to(origin, dirs.shape), dirs, ds.max_t)
        self.origins = np.broadcast_to(origin, dirs.shape)[hit]
        self.dirs = dirs[hit]
        self.depth = depth[hit]
        self.history: list[tuple[int, float]] = []

    def __call__(self, state, iteration: int) -> None:
        from nudba import rendering as rend
        from nudba.sampling import sample_rays

        samples = sample_rays(state.tree, self.origins, self.dirs, 2, np.random.default_rng(7))
        sdf = state.field.sdf(samples.points)
        alpha = rend.sdf_to_alpha_packed(sdf, samples, state.field.sharpness())
        w = rend.composite_packed(alpha, samples)
        rendered = rend.render_depth_batch(samples, w)
        self.history.append((iteration, float(np.mean(np.abs(rendered - self.depth)))))


@pytest.fixture(scope="session")
def mapping_run(tmp_path_factory):
    """Ground-truth poses held fixed for MAPPING_ITERATIONS iterations.

    Returns a dict with the optimized field/tree, the loss trace, the depth
    probe history, the extracted mesh, and mesh metrics against the oracle
    surface samples.
    """
    from nudba import io as nio

    ds = synth.generate_dataset(seed=11, with_images=False)
    problem = dba.Problem.from_dataset(ds)
    problem.frames = [f for f in ds.frames_gt]
    cfg = _acceptance_config(MAPPING_ITERATIONS, seed=3, lr_pose=0.0)
    probe = DepthProbe(ds)
    out = tmp_path_factory.mktemp("mapping_run")
    field, frames, trace = dba.optimize(problem, cfg, out_dir=str(out), probe=probe)

    tree = dba.occupancy_from_field(field, field.config.box, cfg.octree_depth, cfg.band)
    mesh = dba.extract_mesh(field, tree, resolution=192)
    visibility = _frustum_visibility(ds.frames_gt, ds.max_t)
    metrics = nio.mesh_metrics(
        mesh, ds.points, threshold=0.2, eval_box=ds.region, visibility=visibility, seed=0
    )
    return {
        "dataset": ds, "config": cfg, "field": field, "tree": tree, "frames": frames,
        "trace": trace, "probe": probe, "mesh": mesh, "metrics": metrics, "out": out,
    }


@pytest.fixture(scope="session")
def joint_run(tmp_path_factory):
    """Noisy poses jointly optimized for JOINT_ITERATIONS iterations."""
    from nudba import io as nio

    ds = synth.generate_dataset(seed=11, with_images=False, sigma_trans=0.05, sigma_rot_deg=0.5)
    problem = dba.Problem.from_dataset(ds)
    cfg = _acceptance_config(JOINT_ITERATIONS, seed=4, lr_pose=1e-4)
    initial_ate = nio.ate(ds.frames_noisy, ds.frames_gt)
    out = tmp_path_factory.mktemp("joint_run")
    field, frames, trace = dba.optimize(problem, cfg, out_dir=str(out))

    tree = dba.occupancy_from_field(field, field.config.box, cfg.octree_depth, cfg.band)
    mesh = dba.extract_mesh(field, tree, resolution=192)
    visibility = _frustum_visibility(ds.frames_gt, ds.max_t)
    metrics = nio.mesh_metrics(
        mesh, ds.points, threshold=0.2, eval_box=ds.region, visibility=visibility, seed=0
    )
    final_ate = nio.ate(frames, ds.frames_gt)
    return {
        "dataset": ds, "config": cfg, "field": field, "frames": frames, "trace": trace,
        "mesh": mesh, "metrics": metrics, "initial_ate": initial_ate, "final_ate": final_ate,
    }


def _frustum_visibility(frames, max_t: float):
    from nudba.geometry import project_many

    def visible(points: np.ndarray) -> np.ndarray:
        seen = np.zeros(points.shape[0], dtype=bool)
        for f in frames:
            pix, depth, ok = project_many(points, f)
            k = f.intrinsics
            inb = (pix[:, 0] >= -0.5) & (pix[:, 0] <= k.width - 0.5)
            inb &= (pix[:, 1] >= -0.5) & (pix[:, 1] <= k.height - 0.5)
            seen |= ok & inb & (depth <= max_t)
        return seen

    return visible
