"""Adjoint-based optimality checks for robust multi-scenario control on finite scenario trees."""

from .adjoint import (AdjointPair, duality_residual, hamiltonian_eval, hamiltonian_u_gradient,
                      solve_adjoint_explicit, solve_adjoint_recursive)
from .dynamics import (directional_cost_derivative, fd_convergence_report, scenario_cost, simulate_state,
                       solve_variational_explicit, solve_variational_recursive)
from .investment import (InvestmentSpec, build_investment_model, closed_form_adjoint, evaluate_value_pair,
                         optimal_portfolio, solve_theta_star)
from .model import LqFamilySpec, ScenarioModel, build_lq_model, eval_costs, eval_derivatives, eval_dynamics
from .oracle import ControlGrid, brute_force_minimum, certify_candidate, enumerate_adapted_controls
from .path_space import AdaptedProcess, NoiseSpec, PathSpace, build_path_space, fair_coin
from .robust import (AmbiguitySet, MeasureVector, active_measure_set, check_sufficiency,
                     find_common_reference_measure, robust_cost, stationarity_residual)

__all__ = [
    "AdjointPair", "duality_residual", "hamiltonian_eval", "hamiltonian_u_gradient", "solve_adjoint_explicit",
    "solve_adjoint_recursive", "directional_cost_derivative", "fd_convergence_report", "scenario_cost",
    "simulate_state", "solve_variational_explicit", "solve_variational_recursive", "InvestmentSpec",
    "build_investment_model", "closed_form_adjoint", "evaluate_value_pair", "optimal_portfolio",
    "solve_theta_star", "LqFamilySpec", "ScenarioModel", "build_lq_model", "eval_costs", "eval_derivatives",
    "eval_dynamics", "ControlGrid", "brute_force_minimum", "certify_candidate", "enumerate_adapted_controls",
    "AdaptedProcess", "NoiseSpec", "PathSpace", "build_path_space", "fair_coin", "AmbiguitySet",
    "MeasureVector", "active_measure_set", "check_sufficiency", "find_common_reference_measure",
    "robust_cost", "stationarity_residual",
]

__version__ = "0.1.0"
