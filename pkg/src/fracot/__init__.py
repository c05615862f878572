"""Time-fractional optimal transport and mean-field planning on staggered grids.

The solver discretizes the Caputo derivative with the L1 scheme, places
densities on cell centers and fluxes on interior faces, and runs a
G-prox primal-dual hybrid gradient iteration on the discrete saddle problem.
"""

from fracot.grid import ConfigurationError, FieldSet, GridSpec, build_grid
from fracot.fracops import (
    FractionalKernel,
    build_kernel,
    caputo_backward,
    caputo_forward,
    rl_tail_weights,
)
from fracot.spaceops import ConstraintOperator, divergence, gradient_adjoint
from fracot.energy import (
    InteractionSpec,
    h_field,
    kkt_residuals,
    lagrangian,
    total_mass,
)
from fracot.problems import ProblemSpec, exact_integer_ot
from fracot.pdhg import SolverConfig, SolveReport, solve

__all__ = [
    "ConfigurationError",
    "ConstraintOperator",
    "FieldSet",
    "FractionalKernel",
    "GridSpec",
    "InteractionSpec",
    "ProblemSpec",
    "SolveReport",
    "SolverConfig",
    "build_grid",
    "build_kernel",
    "caputo_backward",
    "caputo_forward",
    "divergence",
    "exact_integer_ot",
    "gradient_adjoint",
    "h_field",
    "kkt_residuals",
    "lagrangian",
    "rl_tail_weights",
    "solve",
    "total_mass",
]
