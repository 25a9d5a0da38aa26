"""Coefficient objective and analytic gradients, written directly.

The target is the (weighted) full-parameter aggregate T = sum_u w_u B_u A_u.
Mixing coefficients p, q define M = sum_u p_u B_u and N = sum_u q_u A_u; the
objective is the squared Frobenius gap

    f(p, q) = || M @ N - T ||_F^2.

With E = M @ N - T, the gradients are

    df/dp_u = 2 <E, B_u @ N>_F
    df/dq_u = 2 <E, M @ A_u>_F.

These dense-matrix forms are the reference implementation: the solver's fast
path works in Gram space (see gram.py) and is checked against these in tests.
"""

from __future__ import annotations

import numpy as np


def stack_factors(b_mats, a_mats) -> tuple[np.ndarray, np.ndarray]:
    """Coerce per-client factor lists into (U, k, r) and (U, r, d) arrays."""
    bs = np.ascontiguousarray(np.stack([np.asarray(b, dtype=np.float64) for b in b_mats]))
    as_ = np.ascontiguousarray(np.stack([np.asarray(a, dtype=np.float64) for a in a_mats]))
    if bs.shape[0] != as_.shape[0]:
        raise ValueError(f"{bs.shape[0]} B matrices vs {as_.shape[0]} A matrices")
    if bs.shape[2] != as_.shape[1]:
        raise ValueError(f"inner ranks differ: B has {bs.shape[2]}, A has {as_.shape[1]}")
    return bs, as_


def ideal_target(b_mats, a_mats, weights) -> np.ndarray:
    """T = sum_u w_u B_u @ A_u (raw, without the alpha/r LoRA scale)."""
    bs, as_ = stack_factors(b_mats, a_mats)
    w = np.asarray(weights, dtype=np.float64)
    num_clients, k, r = bs.shape
    # one GEMM over the concatenated factors, with w folded into B's columns
    b_cat = (bs * w[:, None, None]).transpose(1, 0, 2).reshape(k, num_clients * r)
    return b_cat @ as_.reshape(num_clients * r, as_.shape[2])


def na_objective(p, q, b_mats, a_mats, weights) -> float:
    """|| (sum p_u B_u)(sum q_u A_u) - sum w_u B_u A_u ||_F^2."""
    bs, as_ = stack_factors(b_mats, a_mats)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = np.tensordot(p, bs, axes=1)
    n = np.tensordot(q, as_, axes=1)
    e = m @ n - ideal_target(bs, as_, weights)
    return float(np.sum(e * e))


def na_gradients(p, q, b_mats, a_mats, weights) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of na_objective with respect to p and q."""
    bs, as_ = stack_factors(b_mats, a_mats)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = np.tensordot(p, bs, axes=1)
    n = np.tensordot(q, as_, axes=1)
    e = m @ n - ideal_target(bs, as_, weights)
    # <E, B_u N> = <B_u, E N^T> and <E, M A_u> = <A_u, M^T E>
    en_t = e @ n.T
    m_te = m.T @ e
    gp = 2.0 * np.einsum("ukr,kr->u", bs, en_t)
    gq = 2.0 * np.einsum("urd,rd->u", as_, m_te)
    return gp, gq
