"""Doubly-unlinked regression: block-permuted DGP simulation, a
variational-Bayes fitter with relaxed-permutation factors, brute-force
maximum likelihood for small blocks, and GP baselines."""

from .covkernel import CovarianceParams
from .repair import FitConfig, FitReport, Priors, fit
from .simulate import Dataset, SimConfig, simulate

__all__ = [
    "CovarianceParams",
    "Dataset",
    "FitConfig",
    "FitReport",
    "Priors",
    "SimConfig",
    "fit",
    "simulate",
]
