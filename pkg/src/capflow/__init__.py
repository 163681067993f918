"""capflow: sector-space capital allocation engine.

Collective background states, average-capital equilibria with stability
classification, linearized capital/expectation dynamics, Laplace-domain
transition kernels, and a direct Langevin agent simulation for
cross-validation.
"""

__version__ = "0.1.0"

from .model import (EconomyParams, Model, ParamFunctions, Profile, SectorGrid,
                    grid_derivative)
from .background import (BackgroundState, compute_state,
                         firm_capital_distribution, investor_density,
                         solve_firm_density)
from .capital import (CapitalBranch, capital_residual, gamma_hat,
                      regime_closed_form, self_consistent_sweep,
                      sensitivity, solve_branches, stability_classify)
from .dynamics import (DynamicsCoefficients, dispersion_relation,
                       integrate_linearized, oscillation_stability,
                       variation_coefficients)
from .transitions import (TransitionQuery, TransitionResult, firm_transition,
                          interaction_kernels, investor_transition,
                          two_agent_transition)
from .abm import Population, compare_to_field, simulate, stationary_stats
from . import special

__all__ = [
    "EconomyParams", "Model", "ParamFunctions", "Profile", "SectorGrid",
    "grid_derivative", "BackgroundState", "compute_state",
    "firm_capital_distribution", "investor_density", "solve_firm_density",
    "CapitalBranch", "capital_residual", "gamma_hat", "regime_closed_form",
    "self_consistent_sweep", "sensitivity", "solve_branches",
    "stability_classify", "DynamicsCoefficients", "dispersion_relation",
    "integrate_linearized", "oscillation_stability", "variation_coefficients",
    "TransitionQuery", "TransitionResult", "firm_transition",
    "interaction_kernels", "investor_transition", "two_agent_transition",
    "Population", "compare_to_field", "simulate", "stationary_stats",
    "special",
]
