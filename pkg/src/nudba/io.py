"""Dataset formats, checkpoints, meshes, and evaluation metrics.

Binary layouts are little-endian and byte-exact:
  flow      "NUFL" | u32 version=1 | u32 w | u32 h | w*h*2 f32 | w*h u8 mask
  disparity "NUDP" | u32 version=1 | u32 w | u32 h | w*h   f32 | w*h u8 mask
  checkpoint "NUCK"| u32 version=1 | u32 header_len | JSON header | f32 blocks

Flow payloads interleave u and v per pixel, rows scanned top to bottom.
Trajectories use TUM lines `id tx ty tz qx qy qz qw`. Meshes and point
clouds are ASCII PLY with per-vertex normals. Scene and run configuration
are INI text.
"""

from __future__ import annotations

import configparser
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ParamStore
from .errors import (
    BadMagic,
    CountMismatch,
    DimensionMismatch,
    EmptyMesh,
    EmptySamples,
    ParseError,
    TruncatedFile,
)
from .geometry import Box, CameraIntrinsics, Frame, Plane, SE3Pose
from .synth import BoxPrim, PlanePrim, SceneSpec, SpherePrim

FLOW_MAGIC = b"NUFL"
DISP_MAGIC = b"NUDP"
CHECKPOINT_MAGIC = b"NUCK"


def nudba_threads() -> int:
    """Worker-pool cap from NUDBA_THREADS; defaults to the available cores."""
    raw = os.environ.get("NUDBA_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n >= 1 else (os.cpu_count() or 1)


# ------------------------------------------------------------ binary maps


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"{what}: wanted {n} bytes, got {len(data)}")
    return data


def _write_map(path, magic: bytes, data: np.ndarray, valid: np.ndarray, channels: int) -> None:
    h, w = data.shape[:2]
    if valid.shape != (h, w):
        raise DimensionMismatch(f"mask shape {valid.shape} vs map {(h, w)}")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<III", 1, w, h))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(valid, dtype=np.uint8).tobytes())


def _read_map(path, magic: bytes, channels: int, expected_wh=None):
    with open(path, "rb") as f:
        got = _read_exact(f, 4, "magic")
        if got != magic:
            raise BadMagic(f"expected {magic!r}, found {got!r}")
        version, w, h = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != 1:
            raise ParseError(f"unsupported version {version}")
        if expected_wh is not None and (w, h) != tuple(expected_wh):
            raise DimensionMismatch(f"header says {w}x{h}, expected {expected_wh}")
        payload = 4 * w * h * channels
        data = np.frombuffer(_read_exact(f, payload, "payload"), dtype="<f4")
        mask = np.frombuffer(_read_exact(f, w * h, "mask"), dtype=np.uint8)
        trailing = f.read(1)
        if trailing:
            raise DimensionMismatch("file longer than header implies")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.astype(np.float64).reshape(shape), mask.reshape(h, w).astype(bool)


def write_flow(path, flow: np.ndarray, valid: np.ndarray) -> None:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionMismatch(f"flow must be (H, W, 2), got {flow.shape}")
    _write_map(path, FLOW_MAGIC, flow, valid, 2)


def read_flow(path, expected_wh=None) -> tuple[np.ndarray, np.ndarray]:
    return _read_map(path, FLOW_MAGIC, 2, expected_wh)


def write_disparity(path, disp: np.ndarray, valid: np.ndarray) -> None:
    if disp.ndim != 2:
        raise DimensionMismatch(f"disparity must be (H, W), got {disp.shape}")
    _write_map(path, DISP_MAGIC, disp, valid, 1)


def read_disparity(path, expected_wh=None) -> tuple[np.ndarray, np.ndarray]:
    return _read_map(path, DISP_MAGIC, 1, expected_wh)


# ------------------------------------------------------------ trajectories


def write_trajectory(path, poses: list[tuple[int, SE3Pose]]) -> None:
    """TUM lines `id tx ty tz qx qy qz qw`, 17 significant digits."""
    with open(path, "w") as f:
        for fid, pose in poses:
            t, q = pose.translation, pose.quaternion
            vals = " ".join(f"{v:.17g}" for v in (*t, *q))
            f.write(f"{int(fid)} {vals}\n")


def read_trajectory(path) -> list[tuple[int, SE3Pose]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 8:
                raise ParseError(f"{path}:{lineno}: expected 8 fields, got {len(tokens)}")
            try:
                fid = int(tokens[0])
                vals = [float(v) for v in tokens[1:]]
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            q = np.array(vals[3:7])
            if np.linalg.norm(q) < 1e-12:
                raise ParseError(f"{path}:{lineno}: zero quaternion")
            out.append((fid, SE3Pose(q, np.array(vals[0:3]))))
    return out


# -------------------------------------------------------------------- ply


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)


def write_ply(path, mesh: Mesh) -> None:
    """ASCII PLY with optional per-vertex normals; zero faces = point cloud."""
    v, f = mesh.vertices, mesh.faces
    has_n = mesh.normals is not None
    with open(path, "w") as out:
        out.write("ply\nformat ascii 1.0\n")
        out.write(f"element vertex {v.shape[0]}\n")
        out.write("property float x\nproperty float y\nproperty float z\n")
        if has_n:
            out.write("property float nx\nproperty float ny\nproperty float nz\n")
        out.write(f"element face {f.shape[0]}\n")
        out.write("property list uchar int vertex_indices\nend_header\n")
        rows = np.concatenate([v, mesh.normals], axis=1) if has_n else v
        for row in rows:
            out.write(" ".join(f"{x:.9g}" for x in row) + "\n")
        for tri in f:
            out.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def read_ply(path) -> Mesh:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0].strip() != "ply":
        raise BadMagic("not a PLY file")
    n_vert = n_face = 0
    props: list[str] = []
    i = 1
    element = None
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ParseError("only ascii PLY is supported")
        elif tok[0] == "element":
            element = tok[1]
            if tok[1] == "vertex":
                n_vert = int(tok[2])
            elif tok[1] == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and element == "vertex" and tok[1] != "list":
            props.append(tok[2])
        elif tok[0] == "end_header":
            break
    else:
        raise ParseError("missing end_header")
    body = lines[i:]
    if len(body) < n_vert + n_face:
        raise TruncatedFile(f"PLY body has {len(body)} rows, need {n_vert + n_face}")
    try:
        vert_rows = np.array([[float(x) for x in body[r].split()] for r in range(n_vert)])
    except ValueError as e:
        raise ParseError(f"bad vertex row: {e}") from None
    if n_vert and vert_rows.shape[1] != len(props):
        raise ParseError(f"vertex rows have {vert_rows.shape[1]} fields, header lists {len(props)}")
    cols = {name: k for k, name in enumerate(props)}
    verts = vert_rows[:, [cols["x"], cols["y"], cols["z"]]] if n_vert else np.zeros((0, 3))
    normals = None
    if n_vert and all(k in cols for k in ("nx", "ny", "nz")):
        normals = vert_rows[:, [cols["nx"], cols["ny"], cols["nz"]]]
    faces = []
    for r in range(n_vert, n_vert + n_face):
        tok = body[r].split()
        if not tok or int(tok[0]) != 3 or len(tok) != 4:
            raise ParseError(f"face row {r} is not a triangle")
        faces.append([int(tok[1]), int(tok[2]), int(tok[3])])
    return Mesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), normals)


# -------------------------------------------------------------------- ppm


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit, from a float image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise BadMagic(f"expected P6, found {magic!r}")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise TruncatedFile("PPM header ended early")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields[:3])
        if maxval != 255:
            raise ParseError(f"only maxval 255 supported, got {maxval}")
        data = np.frombuffer(_read_exact(f, w * h * 3, "pixels"), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# ------------------------------------------------------------ scene config


def _fmt_vec(v) -> str:
    return " ".join(f"{float(x):.17g}" for x in np.atleast_1d(v))


def write_scene_config(
    path,
    intrinsics: CameraIntrinsics,
    region: Box,
    scene: SceneSpec | None,
    shells: int,
    r_max: float,
    max_t: float,
) -> None:
    cp = configparser.ConfigParser()
    cp["intrinsics"] = {
        "fx": f"{intrinsics.fx:.17g}",
        "fy": f"{intrinsics.fy:.17g}",
        "cx": f"{intrinsics.cx:.17g}",
        "cy": f"{intrinsics.cy:.17g}",
        "width": str(intrinsics.width),
        "height": str(intrinsics.height),
    }
    if intrinsics.baseline is not None:
        cp["intrinsics"]["baseline"] = f"{intrinsics.baseline:.17g}"
    cp["region"] = {"lo": _fmt_vec(region.lo), "hi": _fmt_vec(region.hi)}
    cp["shells"] = {"count": str(shells), "r_max": f"{r_max:.17g}"}
    cp["casting"] = {"max_t": f"{max_t:.17g}"}
    if scene is not None:
        cp["scene"] = {"count": str(len(scene.primitives))}
        for i, prim in enumerate(scene.primitives):
            sec = f"primitive.{i}"
            if isinstance(prim, PlanePrim):
                cp[sec] = {
                    "type": "plane",
                    "normal": _fmt_vec(prim.plane.normal),
                    "offset": f"{prim.plane.offset:.17g}",
                }
            elif isinstance(prim, SpherePrim):
                cp[sec] = {
                    "type": "sphere",
                    "center": _fmt_vec(prim.center),
                    "radius": f"{prim.radius:.17g}",
                }
            elif isinstance(prim, BoxPrim):
                cp[sec] = {
                    "type": "box",
                    "center": _fmt_vec(prim.center),
                    "half": _fmt_vec(prim.half),
                }
            else:
                raise ValueError(f"unknown primitive type {type(prim)!r}")
            cp[sec]["albedo"] = _fmt_vec(prim.albedo)
    with open(path, "w") as f:
        cp.write(f)


def read_scene_config(path):
    """Returns (intrinsics, region, scene | None, shells, r_max, max_t)."""
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise ParseError(f"cannot read config {path}")
        intr = cp["intrinsics"]
        intrinsics = CameraIntrinsics(
            fx=intr.getfloat("fx"),
            fy=intr.getfloat("fy"),
            cx=intr.getfloat("cx"),
            cy=intr.getfloat("cy"),
            width=intr.getint("width"),
            height=intr.getint("height"),
            baseline=intr.getfloat("baseline") if "baseline" in intr else None,
        )
        region = Box(
            np.array([float(v) for v in cp["region"]["lo"].split()]),
            np.array([float(v) for v in cp["region"]["hi"].split()]),
        )
        shells = cp["shells"].getint("count")
        r_max = cp["shells"].getfloat("r_max")
        max_t = cp["casting"].getfloat("max_t")
        scene = None
        if "scene" in cp:
            prims = []
            for i in range(cp["scene"].getint("count")):
                sec = cp[f"primitive.{i}"]
                albedo = tuple(float(v) for v in sec["albedo"].split())
                kind = sec["type"]
                if kind == "plane":
                    normal = np.array([float(v) for v in sec["normal"].split()])
                    prims.append(PlanePrim(Plane(normal, sec.getfloat("offset")), albedo))
                elif kind == "sphere":
                    center = np.array([float(v) for v in sec["center"].split()])
                    prims.append(SpherePrim(center, sec.getfloat("radius"), albedo))
                elif kind == "box":
                    center = np.array([float(v) for v in sec["center"].split()])
                    half = np.array([float(v) for v in sec["half"].split()])
                    prims.append(BoxPrim(center, half, albedo))
                else:
                    raise ParseError(f"unknown primitive type {kind!r}")
            scene = SceneSpec(prims)
    except (configparser.Error, KeyError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from None
    return intrinsics, region, scene, shells, r_max, max_t


def read_run_config(path) -> dict:
    """Flat key/value strings from the [optimize] section of an INI file."""
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise ParseError(f"cannot read config {path}")
        if "optimize" not in cp:
            raise ParseError(f"{path}: missing [optimize] section")
        return dict(cp["optimize"])
    except configparser.Error as e:
        raise ParseError(f"{path}: {e}") from None


# ------------------------------------------------------------- checkpoint


def write_checkpoint(path, store: ParamStore, config: dict | None = None) -> None:
    """All parameter blocks as f32 plus a JSON header with names/shapes."""
    blocks = [
        {"name": name, "shape": list(block.shape), "category": store.category(name)}
        for name, block in store.items()
    ]
    header = json.dumps(
        {"blocks": blocks, "config": config or {}}, sort_keys=True, separators=(",", ":")
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", 1, len(header)))
        f.write(header)
        for name, block in store.items():
            f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
        version, header_len = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != 1:
            raise ParseError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_exact(f, header_len, "json header"))
        except json.JSONDecodeError as e:
            raise ParseError(f"bad checkpoint header: {e}") from None
        store = ParamStore()
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(_read_exact(f, 4 * n, spec["name"]), dtype="<f4")
            store.add(spec["name"], raw.astype(np.float64).reshape(shape), spec["category"])
    return store, header.get("config", {})


# ----------------------------------------------------------------- metrics


def _positions(traj) -> tuple[np.ndarray, np.ndarray]:
    ids, pos = [], []
    for item in traj:
        if isinstance(item, Frame):
            ids.append(item.id)
            pos.append(item.effective_pose().translation)
        else:
            fid, pose = item
            ids.append(fid)
            pos.append(pose.translation)
    order = np.argsort(ids)
    return np.asarray(ids)[order], np.asarray(pos)[order]


def align_rigid(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form SE(3) (R, t) minimizing sum ||R p + t - q||^2."""
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, qc - r @ pc


def ate(estimated, reference) -> float:
    """Position RMSE after closed-form rigid alignment (no scale)."""
    ids_e, p = _positions(estimated)
    ids_r, q = _positions(reference)
    if ids_e.shape != ids_r.shape or np.any(ids_e != ids_r):
        raise CountMismatch(f"trajectories disagree: {ids_e.tolist()} vs {ids_r.tolist()}")
    r, t = align_rigid(p, q)
    res = p @ r.T + t - q
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def sample_mesh_surface(
    mesh: Mesh, density: float = 10.0, seed: int = 0, min_count: int = 2000
) -> np.ndarray:
    """Uniform area-weighted surface samples, at least `density` per m^2."""
    if mesh.faces.shape[0] == 0 or mesh.vertices.shape[0] == 0:
        raise EmptyMesh("mesh has no triangles")
    v = mesh.vertices
    a, b, c = (v[mesh.faces[:, k]] for k in range(3))
    cross = np.cross(b - a, c - a)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = float(areas.sum())
    if total <= 0:
        raise EmptyMesh("mesh has zero surface area")
    count = max(min_count, int(np.ceil(total * density)))
    rng = np.random.default_rng(seed)
    face = rng.choice(areas.shape[0], size=count, p=areas / total)
    r1, r2 = rng.uniform(size=count), rng.uniform(size=count)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    return a[face] + r1[:, None] * (b[face] - a[face]) + r2[:, None] * (c[face] - a[face])


def mesh_metrics(
    mesh: Mesh,
    gt_points: np.ndarray,
    threshold: float = 0.2,
    eval_box: Box | None = None,
    visibility=None,
    density: float = 10.0,
    seed: int = 0,
) -> tuple[float, float, float]:
    """(accuracy, completion, completion ratio) against GT surface samples.

    Accuracy: mean distance from predicted-surface samples to the nearest GT
    point. Completion: mean distance from GT points to the nearest predicted
    sample. Ratio: fraction of GT points within `threshold`. Both sides are
    cropped to `eval_box`; `visibility` may further mask predicted samples.
    """
    pred = sample_mesh_surface(mesh, density=density, seed=seed)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if eval_box is not None:
        pred = pred[eval_box.contains(pred)]
        gt = gt[eval_box.contains(gt)]
    if visibility is not None and pred.shape[0]:
        pred = pred[np.asarray(visibility(pred), dtype=bool)]
    if pred.shape[0] == 0:
        raise EmptyMesh("no predicted surface samples inside the evaluation box")
    if gt.shape[0] == 0:
        raise EmptySamples("no ground-truth points inside the evaluation box")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    return float(d_pred.mean()), float(d_gt.mean()), float(np.mean(d_gt <= threshold))


def psnr(rendered: np.ndarray, reference: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over valid pixels, intensities in [0, 1], capped 99."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape[:2]:
            raise DimensionMismatch(f"mask shape {m.shape} vs image {a.shape[:2]}")
        a, b = a[m], b[m]
    if a.size == 0:
        raise EmptySamples("no valid pixels for PSNR")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return 99.0
    return float(min(10.0 * np.log10(1.0 / mse), 99.0))


# ------------------------------------------------------------ dataset dirs


@dataclass
class LoadedDataset:
    intrinsics: CameraIntrinsics
    frames: list[Frame]
    gt_frames: list[Frame] | None
    flows: dict
    disparities: dict
    images: dict
    region: Box
    shells: int
    r_max: float
    max_t: float
    scene: SceneSpec | None
    points: np.ndarray | None
    normals: np.ndarray | None


def write_dataset(out_dir, ds) -> None:
    """Serialize a synth.Dataset into the on-disk layout."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("flow", "disp", "images"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    write_scene_config(
        os.path.join(out_dir, "scene.cfg"),
        ds.intrinsics,
        ds.region,
        ds.scene,
        ds.shells,
        ds.r_max,
        ds.max_t,
    )
    write_trajectory(
        os.path.join(out_dir, "poses.txt"), [(f.id, f.effective_pose()) for f in ds.frames_noisy]
    )
    write_trajectory(
        os.path.join(out_dir, "poses_gt.txt"), [(f.id, f.pose) for f in ds.frames_gt]
    )
    for (j, k), (flow, valid) in sorted(ds.flows.items()):
        write_flow(os.path.join(out_dir, "flow", f"{j}_{k}.nufl"), flow, valid)
    for j, (disp, valid) in sorted(ds.disparities.items()):
        write_disparity(os.path.join(out_dir, "disp", f"{j}.nudp"), disp, valid)
    for j, img in sorted(ds.images.items()):
        write_ppm(os.path.join(out_dir, "images", f"{j}.ppm"), img)
    if ds.points is not None and ds.points.shape[0]:
        write_ply(
            os.path.join(out_dir, "surface_samples.ply"),
            Mesh(ds.points, np.zeros((0, 3), dtype=np.int64), ds.normals),
        )


def load_dataset(data_dir) -> LoadedDataset:
    intrinsics, region, scene, shells, r_max, max_t = read_scene_config(
        os.path.join(data_dir, "scene.cfg")
    )
    poses = read_trajectory(os.path.join(data_dir, "poses.txt"))
    frames = [Frame(id=fid, intrinsics=intrinsics, pose=pose) for fid, pose in poses]
    ids = {f.id for f in frames}
    gt_frames = None
    gt_path = os.path.join(data_dir, "poses_gt.txt")
    if os.path.exists(gt_path):
        gt_frames = [
            Frame(id=fid, intrinsics=intrinsics, pose=pose)
            for fid, pose in read_trajectory(gt_path)
        ]
    wh = (intrinsics.width, intrinsics.height)
    flows = {}
    flow_dir = os.path.join(data_dir, "flow")
    if os.path.isdir(flow_dir):
        for name in sorted(os.listdir(flow_dir)):
            if not name.endswith(".nufl"):
                continue
            stem = name[:-5]
            try:
                j, k = (int(v) for v in stem.split("_"))
            except ValueError:
                raise ParseError(f"flow file name {name!r} is not J_K.nufl") from None
            if j not in ids or k not in ids:
                raise CountMismatch(f"flow {name} references unknown frames ({j}, {k})")
            flows[(j, k)] = read_flow(os.path.join(flow_dir, name), expected_wh=wh)
    disparities = {}
    disp_dir = os.path.join(data_dir, "disp")
    if os.path.isdir(disp_dir):
        for name in sorted(os.listdir(disp_dir)):
            if not name.endswith(".nudp"):
                continue
            j = int(name[:-5])
            if j not in ids:
                raise CountMismatch(f"disparity {name} references unknown frame {j}")
            disparities[j] = read_disparity(os.path.join(disp_dir, name), expected_wh=wh)
    images = {}
    img_dir = os.path.join(data_dir, "images")
    if os.path.isdir(img_dir):
        for name in sorted(os.listdir(img_dir)):
            if name.endswith(".ppm"):
                images[int(name[:-4])] = read_ppm(os.path.join(img_dir, name))
    points = normals = None
    ply_path = os.path.join(data_dir, "surface_samples.ply")
    if os.path.exists(ply_path):
        cloud = read_ply(ply_path)
        points, normals = cloud.vertices, cloud.normals
    return LoadedDataset(
        intrinsics=intrinsics,
        frames=frames,
        gt_frames=gt_frames,
        flows=flows,
        disparities=disparities,
        images=images,
        region=region,
        shells=shells,
        r_max=r_max,
        max_t=max_t,
        scene=scene,
        points=points,
        normals=normals,
    )
