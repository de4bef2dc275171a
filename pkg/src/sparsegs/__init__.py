"""Sparse-view deformable Gaussian splatting with diffusion and depth priors."""

from .exceptions import SparseGSError
from .scene import CameraView, GaussianCloud, GaussianPrimitive, look_at_w2c
from .rasterizer import RenderSettings, render, render_backward
from .deformation import DeformationHead, EncodingField, apply_deformation
from .priors import (
    DiffusionSchedule,
    add_noise,
    geo_loss,
    make_denoiser,
    make_depth_provider,
    pearson_corr,
    sds_residual,
)
from .training import LossWeights, TrainConfig, run_schedule
from .evalkit import delta1, depth_tv, evaluate, measure_fps, psnr, ssim
from .dataio import load_checkpoint, load_dataset, save_checkpoint, synth_generate

__version__ = "0.1.0"

__all__ = [
    "SparseGSError",
    "CameraView", "GaussianCloud", "GaussianPrimitive", "look_at_w2c",
    "RenderSettings", "render", "render_backward",
    "DeformationHead", "EncodingField", "apply_deformation",
    "DiffusionSchedule", "add_noise", "geo_loss", "make_denoiser",
    "make_depth_provider", "pearson_corr", "sds_residual",
    "LossWeights", "TrainConfig", "run_schedule",
    "delta1", "depth_tv", "evaluate", "measure_fps", "psnr", "ssim",
    "load_checkpoint", "load_dataset", "save_checkpoint", "synth_generate",
    "__version__",
]
