"""Nested Monte Carlo solvers for semi-linear parabolic PDEs with randomized switching times."""

from nestmc.budget import (
    BudgetInputs,
    ErrorBudget,
    ProblemConstants,
    SigmaConstants,
    allocate_particles,
    bias_term,
    error_budget,
    kappa,
    semilinear_bound_scheme1,
    semilinear_bound_scheme2,
    sigma_constants,
    total_bound,
    variance_coeff,
)
from nestmc.errors import ConfigError, InfeasibleBudgetError
from nestmc.estimators import (
    EstimateResult,
    estimate_gradient_scheme1,
    estimate_gradient_scheme2,
    estimate_value,
    expected_evaluations,
    replicate,
    weight_phi_cv,
    weight_phi_hat,
)
from nestmc.plan import NestingPlan
from nestmc.problems import (
    Driver,
    Problem,
    Terminal,
    get_problem,
    hjb_reference,
    linear_reference,
    list_problems,
    make_bs_default,
    make_burgers,
    make_custom,
    make_cva,
    make_hjb,
    make_toy_cosine,
)
from nestmc.rng import RandomStream
from nestmc.sde import ConstantSde
from nestmc.switching import SwitchDensity

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
