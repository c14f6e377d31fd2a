"""Unpaired image denoising: cycle-consistent generators trained jointly with a residual noise extractor.

A denoiser ``F`` and a noise generator ``G`` are trained as a cycle GAN
against discriminators ``D_X`` / ``D_Y`` while a noise extractor ``H``
learns from the pseudo-noise ``x - F(x)`` and in turn constrains ``F``.
The deployed output blends ``F(x)`` with ``x - H(x)``.
"""

from .data import DatasetSplit, Domain, ImageTensor, PatchBatch, load_image, read_manifest, save_image
from .errors import (
    DatasetError,
    DegenerateStatisticsError,
    DivergenceError,
    EvaluationUnavailable,
    ImageFormatError,
    ISCLError,
    ShapeError,
)
from .losses import LossBreakdown, ensemble_denoise
from .metrics import MetricsRecord, psnr, ssim
from .models import ModelBundle, ModelConfig, tiled_forward
from .noise import NoiseSpec, degrade, synthesize_dataset
from .trainer import LADDER, TrainConfig, fit, train_iteration

__version__ = "0.1.0"

__all__ = [
    "DatasetError", "DatasetSplit", "DegenerateStatisticsError", "DivergenceError", "Domain",
    "EvaluationUnavailable", "ISCLError", "ImageFormatError", "ImageTensor", "LADDER", "LossBreakdown",
    "MetricsRecord", "ModelBundle", "ModelConfig", "NoiseSpec", "PatchBatch", "ShapeError", "TrainConfig",
    "degrade", "ensemble_denoise", "fit", "load_image", "psnr", "read_manifest", "save_image", "ssim",
    "synthesize_dataset", "tiled_forward", "train_iteration",
]
