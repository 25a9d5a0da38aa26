"""Rank-r factorization baselines for the aggregate target, with timing.

Given the ideal aggregate T (k x d), produce B (k x r), A (r x d) so that
B @ A approximates T:

    SVD           T = U S V^T, B = U_r sqrt(S_r), A = sqrt(S_r) V_r^T.
                  Optimal in Frobenius norm (Eckart-Young).
    GRAM_SCHMIDT  column-pivoted QR; B = first r columns of Q, A = matching
                  rows of R with the column permutation undone.

compare_execution runs both plus the coefficient solver on the same target
and reports wall clock and normalized gap side by side.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .adapters import DenseMatrix, as_matrix
from .coeffsolver import (
    SolverConfig,
    ideal_target,
    solve_coefficients,
    stack_factors,
    warm_kernels,
)
from .errors import InvalidDimensionsError, NoConvergenceError


class Method(enum.Enum):
    SVD = "svd"
    GRAM_SCHMIDT = "gram_schmidt"


@dataclass(frozen=True)
class FactorizationReport:
    method: Method
    b: DenseMatrix
    a: DenseMatrix
    frobenius_gap: float  # ||B A - T||_F / ||T||_F, 0 for a zero target
    wall_clock_s: float


def _normalized_gap(approx: np.ndarray, target: np.ndarray) -> float:
    t_norm = float(np.linalg.norm(target))
    if t_norm == 0.0:
        return 0.0
    return float(np.linalg.norm(approx - target)) / t_norm


def _check_rank(target: np.ndarray, r: int) -> None:
    if r < 1 or r > min(target.shape):
        raise InvalidDimensionsError(
            f"rank {r} not in [1, min{target.shape}]"
        )


def factorize_svd(target: DenseMatrix, r: int) -> FactorizationReport:
    """Balanced truncated-SVD factorization: both factors get sqrt(S_r)."""
    target = as_matrix(target)
    _check_rank(target, r)
    start = time.perf_counter()
    try:
        u, s, vt = np.linalg.svd(target, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NoConvergenceError(f"SVD did not converge: {exc}") from exc
    root = np.sqrt(s[:r])
    b = u[:, :r] * root
    a = root[:, None] * vt[:r, :]
    elapsed = time.perf_counter() - start
    return FactorizationReport(
        method=Method.SVD,
        b=b,
        a=a,
        frobenius_gap=_normalized_gap(b @ a, target),
        wall_clock_s=elapsed,
    )


def factorize_gram_schmidt(target: DenseMatrix, r: int) -> FactorizationReport:
    """Column-pivoted QR truncation (classical Gram-Schmidt family)."""
    target = as_matrix(target)
    _check_rank(target, r)
    start = time.perf_counter()
    try:
        qmat, rmat, piv = scipy.linalg.qr(target, mode="economic", pivoting=True)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NoConvergenceError(f"pivoted QR failed: {exc}") from exc
    b = qmat[:, :r]
    # undo the column permutation: target[:, piv] = Q R
    a = np.empty((r, target.shape[1]))
    a[:, piv] = rmat[:r, :]
    elapsed = time.perf_counter() - start
    return FactorizationReport(
        method=Method.GRAM_SCHMIDT,
        b=b,
        a=a,
        frobenius_gap=_normalized_gap(b @ a, target),
        wall_clock_s=elapsed,
    )


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    wall_clock_s: float
    normalized_gap: float


def compare_execution(
    b_mats,
    a_mats,
    weights,
    r: int,
    solver_config: SolverConfig | None = None,
) -> list[ComparisonRow]:
    """Factorize the same ideal aggregate three ways and time each.

    The coefficient solver is timed end to end (Gram precompute included) but
    after a warm-up solve, so one-time jit compilation stays out of the
    measurement; its gap is the normalized distance of the solved mix from
    the target.
    """
    warm_kernels()
    bs, as_ = stack_factors(b_mats, a_mats)
    w = np.asarray(weights, dtype=np.float64)
    target = ideal_target(bs, as_, w)
    t_norm = float(np.linalg.norm(target))

    rows = []
    report = factorize_svd(target, r)
    rows.append(ComparisonRow("svd", report.wall_clock_s, report.frobenius_gap))
    report = factorize_gram_schmidt(target, r)
    rows.append(
        ComparisonRow("gram_schmidt", report.wall_clock_s, report.frobenius_gap)
    )

    start = time.perf_counter()
    coeff = solve_coefficients(bs, as_, w, solver_config)
    elapsed = time.perf_counter() - start
    gap = np.sqrt(coeff.final_objective) / t_norm if t_norm > 0 else 0.0
    rows.append(ComparisonRow("flora_na", elapsed, float(gap)))
    return rows


def comparison_to_csv(rows: list[ComparisonRow]) -> str:
    lines = ["method,wall_clock_s,normalized_gap"]
    for row in rows:
        lines.append(f"{row.method},{row.wall_clock_s!r},{row.normalized_gap!r}")
    return "\n".join(lines) + "\n"
