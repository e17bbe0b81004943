"""Multimodal model selection, joint-late fusion and weighted attribution on tabular modalities."""

from .fusion import VARIANTS, FusionModel, FusionSpec, build_fusion, fit_variant
from .nn import DenseNetwork, TrainConfig, softmax_k
from .selection import ApplicationMatrix, enumerate_candidates, optimize, pareto_front, select_gamma_star

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "FusionModel", "FusionSpec", "build_fusion", "fit_variant", "DenseNetwork",
    "TrainConfig", "softmax_k", "ApplicationMatrix", "enumerate_candidates", "optimize",
    "pareto_front", "select_gamma_star",
]
