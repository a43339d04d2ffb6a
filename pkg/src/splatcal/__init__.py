"""splatcal: camera calibration refinement on a differentiable gaussian-splat renderer."""

from .geometry import (Camera, build_covariance, focal_to_fov, fov_to_focal, project_covariance,
                       project_point, quat_to_rotmat, world_to_camera)
from .scene import Gaussian, GaussianScene, merge_scenes, perturb_camera, synth_cameras, synth_scene
from .renderer import SplatList, backward_duv, cull_and_project, loss, psnr, rasterize
from .camgrad import CameraGrad, finite_diff_grad, grad_camera
from .reparam import ReparamFrame, abc_to_params, eigen3_sym, estimate_hessian, grad_abc
from .optim import AdamState, OptimizerConfig, adam_step, project_camera_params
from .schedule import (EmaScore, PhaseReport, ScheduleConfig, calibrate, camera_phase,
                       ema_update, model_train_steps)

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian", "GaussianScene", "SplatList", "CameraGrad", "ReparamFrame",
    "AdamState", "OptimizerConfig", "EmaScore", "PhaseReport", "ScheduleConfig",
    "build_covariance", "focal_to_fov", "fov_to_focal", "project_covariance", "project_point",
    "quat_to_rotmat", "world_to_camera", "merge_scenes", "perturb_camera", "synth_cameras",
    "synth_scene", "backward_duv", "cull_and_project", "loss", "psnr", "rasterize",
    "finite_diff_grad", "grad_camera", "abc_to_params", "eigen3_sym", "estimate_hessian",
    "grad_abc", "adam_step", "project_camera_params", "calibrate", "camera_phase",
    "ema_update", "model_train_steps",
]
