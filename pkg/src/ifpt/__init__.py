"""First-passage-time distributions of Brownian motion for piecewise-linear
boundaries, and the inverse problem: constructing a boundary whose block
hitting probabilities reproduce a prescribed target density.
"""

from .core import (
    BlockSolveRecord,
    BoundarySide,
    ConvergenceError,
    DyadicGrid,
    InfeasibleTargetError,
    NumericalConsistencyError,
    PiecewiseLinearBoundary,
    SubDensity,
    TargetDistribution,
    ValidationError,
    block_mass,
    eval_boundary,
    exponential_target,
    read_boundary_csv,
    read_target_csv,
    tabulated_target,
    uniform_target,
    validate_target,
    write_boundary_csv,
)
from .closed_form import (
    AndersonParams,
    LinearSegment,
    anderson_two_sided_density,
    constant_boundary_cdf,
    linear_boundary_cdf,
    linear_fpt_density,
    linear_transition_kernel,
    symmetric_linear_density,
)
from .forward import (
    FptTable,
    QuadratureConfig,
    block_crossing_probability,
    fpt_distribution_table,
    init_subdensity,
    propagate_subdensity,
    residual_fgkey,
    survival_probability,
)
from .inverse import (
    InverseSolution,
    RefinementReport,
    SolverConfig,
    construct_boundary,
    refine,
    solve_block,
    solve_first_block,
)
from .montecarlo import (
    EmpiricalHittingDistribution,
    SimConfig,
    brute_force_block_check,
    ks_block_distance,
    simulate_hitting_times,
)

__version__ = "0.1.0"

__all__ = [
    "AndersonParams",
    "BlockSolveRecord",
    "BoundarySide",
    "ConvergenceError",
    "DyadicGrid",
    "EmpiricalHittingDistribution",
    "FptTable",
    "InfeasibleTargetError",
    "InverseSolution",
    "LinearSegment",
    "NumericalConsistencyError",
    "PiecewiseLinearBoundary",
    "QuadratureConfig",
    "RefinementReport",
    "SimConfig",
    "SolverConfig",
    "SubDensity",
    "TargetDistribution",
    "ValidationError",
    "anderson_two_sided_density",
    "block_crossing_probability",
    "block_mass",
    "brute_force_block_check",
    "constant_boundary_cdf",
    "construct_boundary",
    "eval_boundary",
    "exponential_target",
    "fpt_distribution_table",
    "init_subdensity",
    "ks_block_distance",
    "linear_boundary_cdf",
    "linear_fpt_density",
    "linear_transition_kernel",
    "propagate_subdensity",
    "read_boundary_csv",
    "read_target_csv",
    "refine",
    "residual_fgkey",
    "simulate_hitting_times",
    "solve_block",
    "solve_first_block",
    "survival_probability",
    "symmetric_linear_density",
    "tabulated_target",
    "uniform_target",
    "validate_target",
    "write_boundary_csv",
]
