"""Closed-form EM estimation for finite gamma mixture models."""

__version__ = "0.1.0"

from .baseline import baseline_em_fit, weighted_gamma_mle  # noqa: E402
from .constrained import (ModeBounds, check_and_project, constrained_em_fit,  # noqa: E402
                          newton_solve_b)
from .em import (em_fit, initialize, log_likelihood, multi_restart_fit,  # noqa: E402
                 responsibilities, update_component, update_weights)
from .model import FitConfig, FitResult, GammaComponent, MixtureModel  # noqa: E402
from .special import (NO_MODE, GammaParams, GenGammaParams, digamma, gamma_log_density,  # noqa: E402
                      gamma_mode, gamma_sample, gen_gamma_log_density, log_gamma_fn,
                      mom_estimate, trigamma)

__all__ = [
    "__version__",
    "NO_MODE", "GammaParams", "GenGammaParams", "log_gamma_fn", "digamma", "trigamma",
    "gamma_log_density", "gen_gamma_log_density", "gamma_mode", "mom_estimate", "gamma_sample",
    "GammaComponent", "MixtureModel", "FitConfig", "FitResult",
    "initialize", "responsibilities", "update_component", "update_weights", "log_likelihood",
    "em_fit", "multi_restart_fit",
    "ModeBounds", "check_and_project", "newton_solve_b", "constrained_em_fit",
    "weighted_gamma_mle", "baseline_em_fit",
]
