"""Bayesian density regression for count data.

A covariate-dependent Dirichlet process mixture of COM-Poisson regressions,
sampled with the exchange algorithm, plus the jittered quantile-regression
baseline and a simulation benchmark comparing the two.
"""

__version__ = "0.1.0"

from .compoisson import ComPoissonParams, ConvergenceError, NormalizerConfig, SamplerError
from .dpm import Dataset, Hyperparams, PosteriorDraws, run_chain
from .estimators import ComPoissonDPMRegressor, JitteredQuantileRegressor
from .exchange import ExchangeProposalConfig, NormalBaseMeasure, RegressionAtom
from .jitter import QuantileFit, RankDeficientError
from .predictive import ConditionalPmf, conditional_pmf, conditional_quantile, quantile_curves

__all__ = [
    "ComPoissonParams",
    "NormalizerConfig",
    "ConvergenceError",
    "SamplerError",
    "Dataset",
    "Hyperparams",
    "PosteriorDraws",
    "run_chain",
    "ComPoissonDPMRegressor",
    "JitteredQuantileRegressor",
    "ExchangeProposalConfig",
    "NormalBaseMeasure",
    "RegressionAtom",
    "QuantileFit",
    "RankDeficientError",
    "ConditionalPmf",
    "conditional_pmf",
    "conditional_quantile",
    "quantile_curves",
]
