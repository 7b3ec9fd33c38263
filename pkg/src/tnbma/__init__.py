"""Truncated-normal Bayesian model averaging for ensemble wind-speed forecasts.

Modules
-------
truncnorm     zero-truncated normal distribution
mixture       group layouts, forecast cases and the BMA predictive mixture
estimation    EM fitting (naive, mean-corrected and full maximum likelihood)
scoring       closed-form CRPS, MAE and RMSE
verification  PIT, rank histograms, KS test, interval coverage and reports
dataio        archive CSV, sliding training windows and synthetic archives
cli           ``tnbma`` command-line front end
"""

from .estimation import EmConfig, FitResult, TrainingSet, fit, fit_full_ml, fit_mean_corrected, fit_naive
from .mixture import THREE_GROUP, TWO_GROUP, BmaModel, ForecastCase, GroupSpec
from .scoring import crps_mixture
from .truncnorm import TruncatedNormal

__version__ = "0.1.0"

__all__ = [
    "BmaModel",
    "EmConfig",
    "FitResult",
    "ForecastCase",
    "GroupSpec",
    "THREE_GROUP",
    "TWO_GROUP",
    "TrainingSet",
    "TruncatedNormal",
    "crps_mixture",
    "fit",
    "fit_full_ml",
    "fit_mean_corrected",
    "fit_naive",
]
