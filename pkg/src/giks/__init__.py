"""Continuous treatment effect estimation with gradient interpolation and kernel smoothing."""
from .data import Dataset, GeneratorSpec, ResponseOracle, generate, split
from .gp import GPConfig, KernelKind, NeighborGP, gp_posterior
from .metrics import MetricsReport, amse, cf_error, dpe, factual_rmse, hsic, paired_ttest_onesided
from .model import ModelState, SplineBasis
from .trainer import GiksConfig, TrainReport, train_giks

__version__ = "0.1.0"

__all__ = [
    "Dataset", "GeneratorSpec", "ResponseOracle", "generate", "split",
    "GPConfig", "KernelKind", "NeighborGP", "gp_posterior",
    "MetricsReport", "amse", "cf_error", "dpe", "factual_rmse", "hsic", "paired_ttest_onesided",
    "ModelState", "SplineBasis", "GiksConfig", "TrainReport", "train_giks",
]
