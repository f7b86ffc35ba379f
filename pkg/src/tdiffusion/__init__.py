"""Variable-resolution conditional diffusion for low-light image enhancement."""

from .backbone import DenoiserNetwork, NetworkConfig, count_parameters, light_config, vanilla_config
from .chroma import ChromaBalancer
from .config import RunConfig, load_config
from .degrade import DegradeParams, ImagePair, build_pair_dataset, degrade_image
from .metrics import error_heatmap, fps_bench, psnr, ssim
from .schedule import (
    NoiseSchedule,
    ResolutionSchedule,
    build_noise_schedule,
    build_resolution_schedule,
    gamma_hat_at,
)
from .tdiff import DiffusionState, NoiseSource, TDiffusion
from .trainer import PairDataset, build_models, fit, smooth_l1, train_step

__version__ = "0.1.0"

__all__ = [
    "ChromaBalancer",
    "DenoiserNetwork",
    "DegradeParams",
    "DiffusionState",
    "ImagePair",
    "NetworkConfig",
    "NoiseSchedule",
    "NoiseSource",
    "PairDataset",
    "ResolutionSchedule",
    "RunConfig",
    "TDiffusion",
    "build_models",
    "build_noise_schedule",
    "build_pair_dataset",
    "build_resolution_schedule",
    "count_parameters",
    "degrade_image",
    "error_heatmap",
    "fit",
    "fps_bench",
    "gamma_hat_at",
    "light_config",
    "load_config",
    "psnr",
    "smooth_l1",
    "ssim",
    "train_step",
    "vanilla_config",
]
