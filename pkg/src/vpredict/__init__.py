"""Variational prediction on a two-parameter sinusoid regression benchmark."""

from .exact import GridSpec, PosteriorGrid, bounded_prior, build_converged_grid, build_grid
from .io import load_fixture
from .methods import (FitResult, PredictiveParams, TrainConfig, VpState, train_bayesdark, train_map, train_mfvi,
                      train_uncond_vp, train_vp)
from .model import Dataset, PriorSpec, SinusoidParams, generate_dataset
from .variational import AugmentedPosteriorConfig, MeanFieldGaussian

__all__ = [
    "AugmentedPosteriorConfig", "Dataset", "FitResult", "GridSpec", "MeanFieldGaussian", "PosteriorGrid",
    "PredictiveParams", "PriorSpec", "SinusoidParams", "TrainConfig", "VpState", "bounded_prior",
    "build_converged_grid", "build_grid", "generate_dataset", "load_fixture", "train_bayesdark", "train_map", "train_mfvi",
    "train_uncond_vp", "train_vp",
]
__version__ = "0.1.0"
