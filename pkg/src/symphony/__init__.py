"""Multi-view Bayesian mixture of single-cell expression and bulk accessibility.

Jointly clusters cells, deconvolves per-cluster peak profiles from bulk data
and infers a regulatory network per cluster.
"""
from .baselines import baseline_kmeans, baseline_nmf_deconvolve
from .inference import FitConfig, FitReport, fit
from .model import (
    Dataset,
    Dims,
    HyperParams,
    LatentState,
    RegulatoryPrior,
    Responsibilities,
    log_joint,
)
from .simulate import GroundTruth, SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Dims", "HyperParams", "LatentState", "RegulatoryPrior", "Responsibilities",
    "FitConfig", "FitReport", "GroundTruth", "SimConfig", "baseline_kmeans",
    "baseline_nmf_deconvolve", "fit", "log_joint", "simulate", "__version__",
]
