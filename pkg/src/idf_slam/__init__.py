"""Incremental RGB-D SLAM with a neural feature tracker and a single
implicit-surface MLP trained online.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import Frame, load_dataset, read_trajectory, write_dataset, write_trajectory
from .errors import ContractViolation, DatasetError, MetricError, TrackerLost
from .geometry import Intrinsics, Pose
from .keyframes import Keyframe, KeyframeStore, covisibility_score
from .mapper import CellLossGrid, LossWeights, optimize_map, optimize_pose
from .meshing import extract_mesh, load_ply, sample_mesh_surface, save_ply
from .metrics import ate, reconstruction_metrics
from .renderer import render, render_frame, render_rays, sample_along_ray
from .scene_mlp import ImplicitMap, PositionalEncoding
from .slam import SlamResult, SystemConfig, initialize, process_frame, run_slam
from .tracker import FeatureExtractor, track, weighted_procrustes

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "DatasetError",
    "MetricError",
    "TrackerLost",
    "Frame",
    "Intrinsics",
    "Pose",
    "Keyframe",
    "KeyframeStore",
    "covisibility_score",
    "CellLossGrid",
    "LossWeights",
    "optimize_map",
    "optimize_pose",
    "ImplicitMap",
    "PositionalEncoding",
    "FeatureExtractor",
    "track",
    "weighted_procrustes",
    "render",
    "render_frame",
    "render_rays",
    "sample_along_ray",
    "extract_mesh",
    "load_ply",
    "sample_mesh_surface",
    "save_ply",
    "ate",
    "reconstruction_metrics",
    "SlamResult",
    "SystemConfig",
    "initialize",
    "process_frame",
    "run_slam",
    "load_dataset",
    "read_trajectory",
    "write_dataset",
    "write_trajectory",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
