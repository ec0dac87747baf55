"""Bayesian nonparametric individualized treatment-response curves."""
from .errors import DomainError, NumericalError, ParseError
from .model import (BaselineParams, NoiseParams, ResponseParams, Trajectory, TreatmentEvent,
                    curve_constants, eval_response_curve, outcome_loglik)
from .dpm import Hyperparams, stick_weights, truncation_error_bound
from .sampler import PosteriorTrace, SamplerConfig, run_chain, run_chains
from .simulator import SimConfig, simulate_cohort
from .evaluate import (ForecastRequest, VariantConfig, apply_variant, evaluate_rmse,
                       extract_curves, posterior_predict)

__version__ = "0.1.0"
