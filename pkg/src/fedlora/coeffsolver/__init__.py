"""Scalar mixing-coefficient solver for nearly-accurate aggregation."""

from .gram import GramData, build_gram, gram_objective
from .objective import ideal_target, na_gradients, na_objective, stack_factors
from .solver import (
    CoefficientPair,
    SolverConfig,
    brute_force_coefficients,
    gram_data,
    solve_coefficients,
    trace_to_csv,
    warm_kernels,
)

__all__ = [
    "CoefficientPair",
    "GramData",
    "SolverConfig",
    "brute_force_coefficients",
    "build_gram",
    "gram_data",
    "gram_objective",
    "ideal_target",
    "na_gradients",
    "na_objective",
    "solve_coefficients",
    "stack_factors",
    "trace_to_csv",
    "warm_kernels",
]
