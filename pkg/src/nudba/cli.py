"""Command-line driver.

Subcommands: `synth` emits a synthetic dataset, `optimize` runs the joint
map/pose optimization, `extract-mesh` runs marching cubes on a checkpoint,
and `eval` scores a result directory against dataset ground truth. Every
command exits nonzero with a single structured line on stderr when inputs
are bad; --seed makes runs reproducible.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import dba, synth
from . import io as nio
from .errors import NudbaError, ParseError
from .geometry import Box, Frame, project_many


def _cmd_synth(args) -> None:
    if args.scene == "default":
        scene = synth.default_scene()
        traj = synth.default_trajectory()
        region = synth.default_region()
        shells, r_max, max_t = synth.DEFAULT_SHELLS, synth.DEFAULT_R_MAX, synth.DEFAULT_MAX_T
    else:
        intr, region, scene, shells, r_max, max_t = nio.read_scene_config(args.scene)
        if scene is None:
            raise ParseError(f"{args.scene} lists no scene primitives")
        traj = synth.TrajectorySpec(intrinsics=intr)
    if args.frames is not None:
        traj = replace(traj, frame_count=args.frames)
    ds = synth.generate_dataset(
        scene,
        traj,
        seed=args.seed,
        sigma_trans=args.noise_trans,
        sigma_rot_deg=args.noise_rot,
        max_t=max_t,
        region=region,
        with_images=not args.no_images,
        brightness_jitter=args.brightness_jitter,
    )
    ds.shells, ds.r_max = shells, r_max
    nio.write_dataset(args.out, ds)
    print(f"dataset: {len(ds.frames_noisy)} frames, {len(ds.flows)} flow pairs -> {args.out}")


def _cmd_optimize(args) -> None:
    ds = nio.load_dataset(args.data)
    problem = dba.Problem.from_dataset(ds)
    mapping = nio.read_run_config(args.config) if args.config else {}
    config = dba.DbaConfig.from_mapping(mapping)
    if args.seed is not None:
        config.seed = args.seed
    if "far_cap" not in mapping:
        config.render = replace(config.render, far_cap=ds.max_t)
    os.makedirs(args.out, exist_ok=True)
    field, frames, trace = dba.optimize(problem, config, out_dir=args.out)
    nio.write_trajectory(
        os.path.join(args.out, "poses_opt.txt"), [(f.id, f.effective_pose()) for f in frames]
    )
    with open(os.path.join(args.out, "trace.txt"), "w") as f:
        for line in trace.lines():
            f.write(line + "\n")
    last = trace.entries[-1] if trace.entries else None
    if last is not None:
        tail = f", ate {last.ate:.4f} m" if last.ate is not None else ""
        print(f"optimize: {config.total_iterations} iterations, final total {last.report.total:.6e}{tail}")
    else:
        print("optimize: 0 iterations (no-op)")


def _cmd_extract_mesh(args) -> None:
    store, meta = nio.read_checkpoint(args.checkpoint)
    field, _, _ = dba.rebuild_models(store, meta)
    box = Box(np.asarray(meta["box_lo"]), np.asarray(meta["box_hi"]))
    tree = dba.occupancy_from_field(field, box, int(meta["octree_depth"]), float(meta["band"]))
    mesh = dba.extract_mesh(field, tree, args.resolution)
    nio.write_ply(args.out, mesh)
    print(f"mesh: {mesh.vertices.shape[0]} vertices, {mesh.faces.shape[0]} faces -> {args.out}")


def _frustum_visibility(frames):
    """Predicate: point lands in-bounds with positive depth in any frame."""
    def visible(points):
        ok = np.zeros(points.shape[0], dtype=bool)
        for f in frames:
            intr = f.intrinsics
            px, _, val = project_many(points, f)
            inb = (
                val
                & (px[:, 0] >= -0.5)
                & (px[:, 0] <= intr.width - 0.5)
                & (px[:, 1] >= -0.5)
                & (px[:, 1] <= intr.height - 0.5)
            )
            ok |= inb
        return ok
    return visible


def _cmd_eval(args) -> None:
    lines = []
    est_path = os.path.join(args.result, "poses_opt.txt")
    if not os.path.exists(est_path):
        est_path = os.path.join(args.result, "poses.txt")
    gt_path = os.path.join(args.data, "poses_gt.txt")
    if os.path.exists(est_path) and os.path.exists(gt_path):
        est = nio.read_trajectory(est_path)
        ref = nio.read_trajectory(gt_path)
        lines.append(f"ate_m {nio.ate(est, ref):.9e}")

    intr, region, _, shells, r_max, _ = nio.read_scene_config(os.path.join(args.data, "scene.cfg"))
    mesh_path = os.path.join(args.result, "mesh.ply")
    samples_path = os.path.join(args.data, "surface_samples.ply")
    if os.path.exists(mesh_path) and os.path.exists(samples_path):
        mesh = nio.read_ply(mesh_path)
        gt_points = nio.read_ply(samples_path).vertices
        pose_src = gt_path if os.path.exists(gt_path) else os.path.join(args.data, "poses.txt")
        frames = [Frame(fid, intr, pose) for fid, pose in nio.read_trajectory(pose_src)]
        acc, comp, ratio = nio.mesh_metrics(
            mesh,
            gt_points,
            threshold=args.threshold,
            eval_box=region,
            visibility=_frustum_visibility(frames),
            seed=args.seed,
        )
        lines.append(f"mesh_accuracy_m {acc:.9e}")
        lines.append(f"mesh_completion_m {comp:.9e}")
        lines.append(f"mesh_completion_ratio {ratio:.9e}")

    ckpt_path = os.path.join(args.result, "checkpoint.nuck")
    images_dir = os.path.join(args.data, "images")
    if os.path.exists(ckpt_path) and os.path.isdir(images_dir):
        store, meta = nio.read_checkpoint(ckpt_path)
        if meta.get("use_photometric"):
            field, distant, color = dba.rebuild_models(store, meta)
            box = Box(np.asarray(meta["box_lo"]), np.asarray(meta["box_hi"]))
            tree = dba.occupancy_from_field(field, box, int(meta["octree_depth"]), float(meta["band"]))
            frames = [
                Frame(fid, intr, pose)
                for fid, pose in nio.read_trajectory(os.path.join(args.result, "poses_opt.txt"))
            ]
            vals = []
            for f in frames:
                img_path = os.path.join(images_dir, f"{f.id}.ppm")
                if not os.path.exists(img_path):
                    continue
                maps = dba.render_maps(
                    field, tree, f, color_head=color, distant=distant,
                    shells=int(meta["shells"]), r_max=float(meta["r_max"]),
                    region=Box(np.asarray(meta["region_lo"]), np.asarray(meta["region_hi"])),
                )
                vals.append(nio.psnr(maps["color"], nio.read_ppm(img_path)))
                lines.append(f"psnr_db_frame_{f.id} {vals[-1]:.9e}")
            if vals:
                lines.append(f"psnr_db_mean {float(np.mean(vals)):.9e}")

    lines.append("note ssim_lpips_omitted (pretrained perceptual nets are out of scope)")
    report = "\n".join(lines) + "\n"
    os.makedirs(args.result, exist_ok=True)
    with open(os.path.join(args.result, "report.txt"), "w") as f:
        f.write(report)
    print(report, end="")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="nudba", description="dense geometric bundle adjustment on a neural SDF map")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--scene", default="default", help="'default' or a scene.cfg path")
    s.add_argument("--out", required=True)
    s.add_argument("--noise-trans", type=float, default=0.0, help="pose translation noise sigma (m)")
    s.add_argument("--noise-rot", type=float, default=0.0, help="pose rotation noise sigma (deg)")
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--no-images", action="store_true")
    s.add_argument("--brightness-jitter", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("optimize", help="run road-surface init + joint optimization")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None, help="run config with an [optimize] section")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.set_defaults(func=_cmd_optimize)

    s = sub.add_parser("extract-mesh", help="marching cubes over a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--resolution", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_extract_mesh)

    s = sub.add_parser("eval", help="score a result directory against a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--result", required=True)
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_eval)

    args = p.parse_args(argv)
    try:
        args.func(args)
    except (NudbaError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
