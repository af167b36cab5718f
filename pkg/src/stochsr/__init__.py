"""Stochastic reconstruction losses for super-resolution, desk scale.

A numpy-backed toolkit: a minimal reverse-mode autodiff engine, the
expected-absolute-error loss family with data-adaptive noise, a
two-branch (mean + uncertainty) SR model, bicubic data pipeline, Adam
trainer, evaluation metrics, and scripted gradient-property experiments.
"""

from . import analysis, autodiff, data, distributions, losses, metrics, models, trainer
from .autodiff import Tensor
from .distributions import Rng
from .losses import LossSpec
from .models import SigmaBranchConfig, TrunkConfig, build_model

__all__ = [
    "analysis",
    "autodiff",
    "data",
    "distributions",
    "losses",
    "metrics",
    "models",
    "trainer",
    "Tensor",
    "Rng",
    "LossSpec",
    "TrunkConfig",
    "SigmaBranchConfig",
    "build_model",
]

__version__ = "0.1.0"
