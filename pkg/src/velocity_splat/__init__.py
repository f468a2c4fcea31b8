"""Flow-supervised dynamic Gaussian splatting on the CPU.

Gaussians live in a canonical frame and are moved over time by a learned
deformation field. Each Gaussian's projected motion is rendered as a dense
velocity image, which is supervised with optical flow, used to densify
under-covered moving regions, and refined per Gaussian with an extended
Kalman filter.
"""
from .deformation import DeformationField, TimeStamp, deform, gaussian_velocity_2d
from .densify import FADConfig, farthest_point_sample, run_fad
from .ekf import NoiseModel, ekf_step, refine_trajectories
from .errors import (BehindCamera, DataError, NonFiniteLoss, ShapeMismatch, SingularInnovation, SingularJacobian,
                     SplatError, WindowLengthMismatch)
from .losses import DynamicMask, FlowField, LossReport, LossWeights
from .metrics import EvalReport, dpsnr, evaluate, psnr, ssim, velocity_epe
from .rasterizer import RenderBuffers, render
from .scene import CameraModel, CanonicalScene, Gaussian3D, covariance_of, project_point, unproject_pixel
from .synthetic import Dataset, make_scene, synthesize, two_group_recipe
from .train import Checkpoint, TrainConfig, run

__version__ = "0.1.0"

__all__ = [
    "BehindCamera", "CameraModel", "CanonicalScene", "Checkpoint", "DataError", "Dataset", "DeformationField",
    "DynamicMask", "EvalReport", "FADConfig", "FlowField", "Gaussian3D", "LossReport", "LossWeights", "NoiseModel",
    "NonFiniteLoss", "RenderBuffers", "ShapeMismatch", "SingularInnovation", "SingularJacobian", "SplatError",
    "TimeStamp", "TrainConfig", "WindowLengthMismatch", "covariance_of", "deform", "dpsnr", "ekf_step", "evaluate",
    "farthest_point_sample", "gaussian_velocity_2d", "make_scene", "project_point", "psnr", "refine_trajectories",
    "render", "run", "run_fad", "ssim", "synthesize", "two_group_recipe", "unproject_pixel", "velocity_epe",
]
