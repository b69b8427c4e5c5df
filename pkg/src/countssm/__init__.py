"""Observation-driven Poisson-gamma state-space models for panel count data.

Exact conjugate filtering with negative-binomial one-step predictions,
forward simulation of every variance regime, and two-step maximum
likelihood with covariates.
"""

from .dist import BetaLaw, DomainError, GammaLaw, NBLaw, nb_log_pmf, rng_stream
from .estimate import (
    DynamicsFit,
    FitOptions,
    compare_models,
    fit_dynamics,
    panel_loglik,
    two_step,
)
from .filtering import (
    FilterState,
    FilterTrace,
    Observation,
    forecast_mean,
    init_state,
    predict,
    predictive_law,
    predictive_mean,
    run_filter,
    update,
)
from .io import Panel, PanelSchema, PanelSeries, SynthSpec, load_panel, split_panel, synth_panel
from .metrics import ForecastPair, mae, pdl, rmse
from .regimes import RegimeKind, RegimeSpec, q_pair, variance_recursion
from .regression import DesignRow, GlmFit, fit_nb_glm, intensity
from .simulate import SimPath, SimStudyConfig, run_study, simulate_path, step_theta

__version__ = "0.1.0"

__all__ = [
    "BetaLaw",
    "DesignRow",
    "DomainError",
    "DynamicsFit",
    "FilterState",
    "FilterTrace",
    "FitOptions",
    "ForecastPair",
    "GammaLaw",
    "GlmFit",
    "NBLaw",
    "Observation",
    "Panel",
    "PanelSchema",
    "PanelSeries",
    "RegimeKind",
    "RegimeSpec",
    "SimPath",
    "SimStudyConfig",
    "SynthSpec",
    "compare_models",
    "fit_dynamics",
    "fit_nb_glm",
    "forecast_mean",
    "init_state",
    "intensity",
    "load_panel",
    "mae",
    "nb_log_pmf",
    "panel_loglik",
    "pdl",
    "predict",
    "predictive_law",
    "predictive_mean",
    "q_pair",
    "rmse",
    "rng_stream",
    "run_filter",
    "run_study",
    "simulate_path",
    "split_panel",
    "step_theta",
    "synth_panel",
    "two_step",
    "update",
    "variance_recursion",
]
