"""Multi-view stereo depth-map reconstruction with edge-confined,
attention-consistent patch deformation and disparity-sampling optimization."""

__version__ = "0.1.0"

from .config import EngineConfig, apply_ablations
from .engine import ReconstructionResult, fuse, propagate_candidates, reconstruct
from .estimator import MultiViewDepthEstimator
from .geometry import (Homography, PlaneHypothesis, compute_homography,
                       perturb_hypothesis, random_hypothesis, warp_pixel)
from .rng import RandomStream
from .scene_io import (CameraParams, DepthNormalMap, ImageBuffer, MaskPyramid,
                       SceneBundle, export_point_cloud, load_scene, save_scene,
                       read_depth_pfm, write_depth_pfm)
from .validation import check_scene_bundle

__all__ = [
    "CameraParams", "DepthNormalMap", "EngineConfig", "Homography",
    "ImageBuffer", "MaskPyramid", "MultiViewDepthEstimator",
    "PlaneHypothesis", "RandomStream", "ReconstructionResult", "SceneBundle",
    "apply_ablations", "check_scene_bundle", "compute_homography",
    "export_point_cloud", "fuse", "load_scene", "perturb_hypothesis",
    "propagate_candidates", "random_hypothesis", "read_depth_pfm",
    "reconstruct", "save_scene", "warp_pixel", "write_depth_pfm",
]
