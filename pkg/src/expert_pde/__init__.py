"""Monotone finite-difference solver for the prediction-with-expert-advice PDE."""

__version__ = "0.1.0"

from .analysis import (
    canonical_strategy,
    comb_strategy,
    convergence_study,
    localization_study,
    optimality_report,
    player_strategy,
    property_report,
)
from .closed_form import exact_reduced, exact_solution
from .pde_core import (
    ConvergenceError,
    Field,
    FullGrid,
    NonFiniteError,
    SolveOptions,
    apply_operator,
    discrete_hessian,
    payoff,
    residual,
    solve_full,
    solve_sector,
)
from .sector_grid import GridConfig, SectorGrid, build_stencils, grid_count, lift, sort_point
from .snapshot import load_field, save_field

__all__ = [
    "ConvergenceError",
    "Field",
    "FullGrid",
    "GridConfig",
    "NonFiniteError",
    "SectorGrid",
    "SolveOptions",
    "apply_operator",
    "build_stencils",
    "canonical_strategy",
    "comb_strategy",
    "convergence_study",
    "discrete_hessian",
    "exact_reduced",
    "exact_solution",
    "grid_count",
    "lift",
    "load_field",
    "localization_study",
    "optimality_report",
    "payoff",
    "player_strategy",
    "property_report",
    "residual",
    "save_field",
    "solve_full",
    "solve_sector",
    "sort_point",
]
