"""Coefficient solving: Adam descent plus a brute-force oracle.

solve_coefficients starts from p = q = client weights, which makes the very
first evaluated point the separate-averages (FedIT) aggregate. Because the
best iterate over the whole trace is returned, the solved aggregate can never
be worse than separate averaging - the dominance property the experiments
rely on is structural, not empirical.

brute_force_coefficients exhaustively scans a symmetric coefficient grid and
is only feasible for U <= 3; it exists as an independent check that the
descent is not missing a materially better point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backend import active_backend
from ..errors import IntractableInstanceError, SolverDivergedError
from .gram import GramData, build_gram
from .kernels import (
    adam_loop_numba,
    adam_loop_numpy,
    grid_scan_numba,
    grid_scan_numpy,
)
from .objective import na_objective, stack_factors

_GRID_POINT_GUARD = 10**8


@dataclass(frozen=True)
class SolverConfig:
    """Adam hyperparameters for the coefficient solve.

    init_scale=None starts from p = q = client weights (the separate-averages
    point); a float starts from constant vectors instead, which is mainly
    useful for probing the p/q scale gauge.
    """

    steps: int = 100
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    init_scale: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class CoefficientPair:
    """Solved mixing coefficients and the objective values along the way.

    `p`/`q` are the best iterate; objective_trace[0] is the value at
    initialization, so min(trace) <= trace[0] always holds. final_objective
    is re-evaluated through the direct dense-matrix objective rather than the
    Gram form, tying the reported number to the definition under test.
    """

    p: np.ndarray
    q: np.ndarray
    objective_trace: np.ndarray
    final_objective: float

    @property
    def initial_objective(self) -> float:
        return float(self.objective_trace[0])


def trace_to_csv(pair: CoefficientPair) -> str:
    lines = ["step,objective"]
    for i, v in enumerate(pair.objective_trace):
        lines.append(f"{i},{float(v)!r}")
    return "\n".join(lines) + "\n"


def _initial_point(config: SolverConfig, weights: np.ndarray) -> np.ndarray:
    if config.init_scale is None:
        return weights.astype(np.float64).copy()
    return np.full(weights.shape[0], float(config.init_scale))


def solve_coefficients(b_mats, a_mats, weights, config: SolverConfig | None = None) -> CoefficientPair:
    """Run Adam on the Gram-space objective and return the best iterate."""
    cfg = config if config is not None else SolverConfig()
    bs, as_ = stack_factors(b_mats, a_mats)
    w = np.asarray(weights, dtype=np.float64)
    gram = build_gram(bs, as_, w)
    p0 = _initial_point(cfg, w)
    q0 = _initial_point(cfg, w)

    if active_backend() == "numba":
        loop = adam_loop_numba
    else:
        loop = adam_loop_numpy
    best_p, best_q, trace, _, status = loop(
        gram.sb_flat,
        gram.sa_flat,
        gram.sb_flat_t,
        gram.sa_flat_t,
        gram.cross,
        gram.t_norm_sq,
        p0,
        q0,
        cfg.steps,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    )
    if status < 0:
        raise SolverDivergedError(
            f"coefficient objective became non-finite after {len(trace) - 1} steps "
            f"(lr={cfg.learning_rate})"
        )
    final = na_objective(best_p, best_q, bs, as_, w)
    return CoefficientPair(
        p=best_p, q=best_q, objective_trace=trace, final_objective=final
    )


def brute_force_coefficients(
    b_mats,
    a_mats,
    weights,
    grid_range: float = 2.0,
    grid_steps: int = 41,
) -> CoefficientPair:
    """Exhaustive search over [-grid_range, +grid_range]^(2U).

    Only tractable for tiny instances; guarded at U <= 3 and
    grid_steps^(2U) <= 1e8.
    """
    bs, as_ = stack_factors(b_mats, a_mats)
    w = np.asarray(weights, dtype=np.float64)
    num_clients = bs.shape[0]
    if num_clients > 3:
        raise IntractableInstanceError(
            f"brute force supports at most 3 clients, got {num_clients}"
        )
    if grid_steps ** (2 * num_clients) > _GRID_POINT_GUARD:
        raise IntractableInstanceError(
            f"{grid_steps}^{2 * num_clients} grid points exceed the "
            f"{_GRID_POINT_GUARD:.0e} guard"
        )
    if grid_range <= 0 or grid_steps < 2:
        raise IntractableInstanceError("need grid_range > 0 and grid_steps >= 2")

    gram = build_gram(bs, as_, w)
    grid_values = np.linspace(-grid_range, grid_range, grid_steps)
    sa_flat_perm = np.ascontiguousarray(gram.sa_flat_t.T)

    if active_backend() == "numba":
        scan = grid_scan_numba
    else:
        scan = grid_scan_numpy
    best_p, best_q, _ = scan(
        gram.sb_flat, sa_flat_perm, gram.cross, gram.t_norm_sq, grid_values, num_clients
    )
    final = na_objective(best_p, best_q, bs, as_, w)
    return CoefficientPair(
        p=best_p,
        q=best_q,
        objective_trace=np.array([final]),
        final_objective=final,
    )


def gram_data(b_mats, a_mats, weights) -> GramData:
    """Expose the precomputed quadratic form (used by benchmarks and tests)."""
    bs, as_ = stack_factors(b_mats, a_mats)
    return build_gram(bs, as_, np.asarray(weights, dtype=np.float64))


_WARMED: set[str] = set()


def warm_kernels() -> None:
    """Run one tiny solve and grid scan on the active backend.

    The first numba call pays jit compilation; anything that times the solver
    (the decomposition comparison, benchmarks) should call this first so the
    measurement reflects steady state. Idempotent per backend.
    """
    backend = active_backend()
    if backend in _WARMED:
        return
    b = np.zeros((2, 2, 1))
    b[:, 0, 0] = 1.0
    a = np.ones((2, 1, 2))
    w = np.array([0.5, 0.5])
    solve_coefficients(b, a, w, SolverConfig(steps=2))
    brute_force_coefficients(b, a, w, grid_range=1.0, grid_steps=3)
    _WARMED.add(backend)
