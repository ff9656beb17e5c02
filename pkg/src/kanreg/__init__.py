"""Deformable image registration with Chebyshev KAN coordinate networks."""

from .chebyshev import BasisConfig, DegreeSet
from .engine import RegistrationConfig, RegistrationError, RegistrationResult, SeedRun, register_pair, run_seeds
from .losses import LossWeights
from .metrics import LandmarkSet, MetricsReport, dice, hd95, jacobian_map, njd, threshold_table, tre
from .network import KanModel, init_model, load_checkpoint, model_forward, save_checkpoint
from .sampler import Mask, Volume, dense_displacement, warp_dense

__version__ = "0.1.0"

__all__ = [
    "BasisConfig",
    "DegreeSet",
    "RegistrationConfig",
    "RegistrationError",
    "RegistrationResult",
    "SeedRun",
    "register_pair",
    "run_seeds",
    "LossWeights",
    "LandmarkSet",
    "MetricsReport",
    "dice",
    "hd95",
    "jacobian_map",
    "njd",
    "threshold_table",
    "tre",
    "KanModel",
    "init_model",
    "load_checkpoint",
    "model_forward",
    "save_checkpoint",
    "Mask",
    "Volume",
    "dense_displacement",
    "warp_dense",
]
