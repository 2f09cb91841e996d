"""Illumination-robust semantic Gaussian-splatting RGB-D SLAM, desk scale.

Library layout:
  core       map / pose / frame types and Lie-group helpers
  render     differentiable splat renderer and its reverse pass
  palette    canonical-palette albedo quantizer (straight-through gradients)
  drb        SSIM gate, affine exposure model, corrective loss
  tracking   constant-velocity prediction + pose descent per frame
  keyframes  reprojection-ratio and semantic-novelty filters
  mapping    joint map optimization, densify, prune
  synth      synthetic-world oracle (scenes, trajectories, corruptions)
  metrics    ATE RMSE / PSNR / mIoU / depth L1
  pipeline   end-to-end runner and the ablation harness
  figures    matplotlib exports written next to the reports
"""

__version__ = "0.1.0"

from .core import (Frame, GaussianMap, GaussianPrimitive, Intrinsics, Pose,
                   compose, inverse, world_to_camera, camera_to_world,
                   covariance3d)
from .palette import PaletteSpec, quantize_albedo, quantize_channel
from .render import RenderBuffers, RenderConfig, render, render_backward
from .drb import ExposureParams, GateState, apply_exposure, drb_loss, evaluate_gate, ssim
from .metrics import EvalReport, ate_rmse, depth_l1, miou, psnr

__all__ = [
    "Frame", "GaussianMap", "GaussianPrimitive", "Intrinsics", "Pose",
    "compose", "inverse", "world_to_camera", "camera_to_world", "covariance3d",
    "PaletteSpec", "quantize_albedo", "quantize_channel",
    "RenderBuffers", "RenderConfig", "render", "render_backward",
    "ExposureParams", "GateState", "apply_exposure", "drb_loss",
    "evaluate_gate", "ssim",
    "EvalReport", "ate_rmse", "depth_l1", "miou", "psnr",
]
