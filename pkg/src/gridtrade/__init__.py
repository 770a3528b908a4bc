"""Two-stage energy-trading game simulator."""

from .model import (
    EnergyUser,
    EquilibriumResult,
    FeasibleSet,
    GridParams,
    Scenario,
    eu_utility,
    grid_cost,
    joint_utility,
    validate_scenario,
)
from .projection import ProjectionError, ProjectionResult, project_box_budget, project_halfspace_then_set
from .vi_solver import (
    ArmijoSearchError,
    IterationRecord,
    PseudoGradient,
    SolverConfig,
    SolverTrace,
    mu_vector,
    natural_residual,
    solve_ve,
    ve_closed_form,
)
from .price_opt import InfeasiblePriceBudget, PriceSolution, optimize_prices, price_grid_oracle
from .engine import (
    GameOutcome,
    Message,
    MessageLog,
    NSEReport,
    ScenarioValidationError,
    check_nse,
    run_fit,
    run_stackelberg,
)
from .oracle import OracleReport, social_optimality_audit, ve_oracle
from .cli import ExperimentConfig, run_experiment, sample_scenario

__version__ = "0.1.0"
