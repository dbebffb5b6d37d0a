"""Multigraph vehicle routing with a node-then-edge factorized policy."""

from .core import (
    MultigraphInstance,
    ProblemSpec,
    Route,
    RouteEvaluation,
    SpecMismatch,
    StructuralError,
    Variant,
    cheapest_edge_matrix,
    evaluate_route,
    validate_route,
)
from .pareto import ParetoArchive, Preference, chebyshev_cost, hypervolume_2d, linear_cost, pareto_insert

__version__ = "0.1.0"
