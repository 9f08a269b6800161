"""Dense geometric bundle adjustment on a neural implicit SDF map.

The package jointly optimizes a multiresolution-hash-grid signed distance
field and SE(3) camera pose corrections by rendering optical flow and
stereo disparity through volume compositing and comparing against dense
per-pixel observations. A synthetic analytic-SDF scene generator provides
exact supervision and ground truth for evaluation.
"""

from . import autodiff, dba, errors, field, geometry, io, losses, rendering, sampling, synth
from .dba import DbaConfig, OptimizationTrace, Problem, extract_mesh, optimize, road_surface_init
from .field import ColorHead, DistantField, HashGridConfig, SdfField
from .geometry import Box, CameraIntrinsics, Frame, Plane, Ray, SE3Pose
from .io import LoadedDataset, Mesh, ate, load_dataset, mesh_metrics, psnr, write_dataset
from .losses import LossConfig, LossReport, total_loss
from .rendering import RenderConfig
from .sampling import Octree, RaySamples, build_octree, sample_rays, update_octree
from .synth import Dataset, SceneSpec, TrajectorySpec, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "autodiff", "dba", "errors", "field", "geometry", "io", "losses", "rendering", "sampling", "synth",
    "DbaConfig", "OptimizationTrace", "Problem", "extract_mesh", "optimize", "road_surface_init",
    "ColorHead", "DistantField", "HashGridConfig", "SdfField",
    "Box", "CameraIntrinsics", "Frame", "Plane", "Ray", "SE3Pose",
    "LoadedDataset", "Mesh", "ate", "load_dataset", "mesh_metrics", "psnr", "write_dataset",
    "LossConfig", "LossReport", "total_loss",
    "RenderConfig",
    "Octree", "RaySamples", "build_octree", "sample_rays", "update_octree",
    "Dataset", "SceneSpec", "TrajectorySpec", "generate_dataset",
    "__version__",
]
