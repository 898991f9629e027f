"""Diffusion recommenders over user-item interaction vectors, with latent
(clustered VAE) and time-reweighted variants."""

from .diffusion import DenoiserNet, TrainConfig, infer, train
from .errors import ConfigError, DataError, DiffRecError, NumericalError, UsageError
from .schedule import NoiseSchedule, build_schedule

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DenoiserNet", "DiffRecError", "NoiseSchedule", "NumericalError",
    "TrainConfig", "UsageError", "build_schedule", "infer", "train",
]
