"""Longitudinal Tweedie mixed models fitted by quasi-score and Pearson estimating equations."""

from .covariance import (
    AssociationParams,
    CorrelationStructure,
    ModelSpec,
    blup_predict,
    build_cluster_cov,
    k_matrix,
)
from .estimating import ClusterData, Theta
from .inference import SandwichResult, sandwich, wald
from .simulate import SimConfig, gen_dataset, marginal_cv, preset_config
from .solver import FitResult, SolverConfig, fit
from .study import StudyReport, run_study
from .tweedie import TweedieSpec

__all__ = [
    "AssociationParams",
    "ClusterData",
    "CorrelationStructure",
    "FitResult",
    "ModelSpec",
    "SandwichResult",
    "SimConfig",
    "SolverConfig",
    "StudyReport",
    "Theta",
    "TweedieSpec",
    "blup_predict",
    "build_cluster_cov",
    "fit",
    "gen_dataset",
    "k_matrix",
    "marginal_cv",
    "run_study",
    "sandwich",
    "preset_config",
    "wald",
]

__version__ = "0.1.0"
