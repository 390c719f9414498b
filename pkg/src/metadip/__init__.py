"""Meta-learned Deep Image Prior.

Learns a starting point (weights, per-step learning rates, input) for DIP
so that a few dozen iterations reach the quality that random-init DIP
needs hundreds for. Includes denoising, compressive sensing and phase
retrieval forward models, SIREN and PnP-ADMM baselines, and a benchmark
harness.
"""
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    FormatError,
    IncompatibleCheckpointError,
    MetaDIPError,
    NonFiniteError,
    RegistryError,
    UnsupportedOperationError,
    UnsupportedVersionError,
)
from .estimators import DeepImagePrior, MetaDIP, PnPADMM
from .imaging import ImageDataset, load_dataset, nmse, psnr, total_variation
from .inner import FitResult, InnerLoopConfig, fit, fit_differentiable, vanilla_dip_config
from .meta import MetaConfig, MetaInitialization, load_checkpoint, meta_train, save_checkpoint
from .networks import DipNetConfig, SirenConfig, build_network
from .operators import MeasurementOperator, load_operator, make_operator, save_operator
from .pnp import ADMMConfig, get_denoiser, grid_search, pnp_admm_solve, register_denoiser

__version__ = "0.1.0"

__all__ = [
    "ADMMConfig",
    "ConfigError",
    "DataError",
    "DeepImagePrior",
    "DegenerateInputError",
    "DimensionError",
    "DipNetConfig",
    "DivergenceError",
    "FitResult",
    "FormatError",
    "ImageDataset",
    "IncompatibleCheckpointError",
    "InnerLoopConfig",
    "MeasurementOperator",
    "MetaConfig",
    "MetaDIP",
    "MetaDIPError",
    "MetaInitialization",
    "NonFiniteError",
    "PnPADMM",
    "RegistryError",
    "SirenConfig",
    "UnsupportedOperationError",
    "UnsupportedVersionError",
    "build_network",
    "fit",
    "fit_differentiable",
    "get_denoiser",
    "grid_search",
    "load_checkpoint",
    "load_dataset",
    "make_operator",
    "meta_train",
    "nmse",
    "pnp_admm_solve",
    "psnr",
    "register_denoiser",
    "save_checkpoint",
    "save_operator",
    "load_operator",
    "total_variation",
    "vanilla_dip_config",
]
