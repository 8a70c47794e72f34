"""Numerical laboratory for the biharmonic nonlinear Schrodinger equation."""

from .grids import (
    FieldSnapshot,
    InitialCondition,
    RadialGrid,
    SimulationConfig,
    build_uniform_grid,
    evaluate_initial_condition,
    interpolate_to_grid,
    quadrature,
)
from .operators import (
    BandedOperator,
    LinearSolveError,
    apply_operator,
    assemble_biharmonic,
    assemble_gradient,
    assemble_laplacian,
    solve_shifted,
)

__version__ = "0.1.0"
