"""Gram-space form of the coefficient objective.

Expanding f(p, q) = ||M N - T||_F^2 gives

    f = tr(G_B(p) G_A(q)) - 2 p^T C q + ||T||_F^2

with the r x r Gram products and the cross matrix

    G_B(p) = M^T M = sum_{u,v} p_u p_v  B_u^T B_v
    G_A(q) = N N^T = sum_{u,v} q_u q_v  A_u A_v^T
    C[u,v] = <B_u^T T, A_v>_F.

Everything data-dependent is precomputed once per solve; each optimizer step
then costs O(U^2 r^2) independent of the layer dimensions k and d. Gradients
in this form:

    (grad_p)_u = 2 ( sum_v KB[u,v] p_v - (C q)_u ),  KB[u,v] = tr(S_B[u,v] G_A)
    (grad_q)_u = 2 ( sum_v KA[u,v] q_v - (C^T p)_u ), KA[u,v] = tr(S_A[u,v] G_B)

where S_B[u,v] = B_u^T B_v and S_A[u,v] = A_u A_v^T.

The kernels consume flattened layouts: S_B as (U*U, r*r) rows, plus a
transposed copy whose rows are additionally (a,b)->(b,a) permuted so that the
per-step contractions are contiguous dot products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import stack_factors


@dataclass(frozen=True)
class GramData:
    """Precomputed quadratic-form data for one layer's solve."""

    sb_flat: np.ndarray  # (U*U, r*r)   rows = vec(B_u^T B_v)
    sa_flat: np.ndarray  # (U*U, r*r)   rows = vec(A_u A_v^T)
    sb_flat_t: np.ndarray  # (r*r, U*U) transposed, rows permuted (a,b)->(b,a)
    sa_flat_t: np.ndarray  # (r*r, U*U) likewise
    cross: np.ndarray  # (U, U)       C[u,v] = <B_u^T T, A_v>
    t_norm_sq: float  # ||T||_F^2
    num_clients: int
    rank: int


def build_gram(b_mats, a_mats, weights) -> GramData:
    bs, as_ = stack_factors(b_mats, a_mats)
    w = np.asarray(weights, dtype=np.float64)
    num_clients, k, r = bs.shape
    d = as_.shape[2]

    # Concatenated factors turn the pairwise Gram blocks into two GEMMs.
    b_cat = bs.transpose(1, 0, 2).reshape(k, num_clients * r)
    a_cat = as_.reshape(num_clients * r, d)
    sb = (b_cat.T @ b_cat).reshape(num_clients, r, num_clients, r)
    sa = (a_cat @ a_cat.T).reshape(num_clients, r, num_clients, r)

    target = (b_cat * np.repeat(w, r)) @ a_cat
    # C[u,v] = trace of the (u,v) block of B_cat^T T A_cat^T
    blocks = (b_cat.T @ target @ a_cat.T).reshape(num_clients, r, num_clients, r)
    cross = np.ascontiguousarray(np.einsum("uava->uv", blocks))

    sb_flat = np.ascontiguousarray(sb.transpose(0, 2, 1, 3).reshape(num_clients**2, r * r))
    sa_flat = np.ascontiguousarray(sa.transpose(0, 2, 1, 3).reshape(num_clients**2, r * r))
    perm = np.arange(r * r).reshape(r, r).T.ravel()
    sb_flat_t = np.ascontiguousarray(sb_flat[:, perm].T)
    sa_flat_t = np.ascontiguousarray(sa_flat[:, perm].T)

    return GramData(
        sb_flat=sb_flat,
        sa_flat=sa_flat,
        sb_flat_t=sb_flat_t,
        sa_flat_t=sa_flat_t,
        cross=cross,
        t_norm_sq=float(np.sum(target * target)),
        num_clients=num_clients,
        rank=r,
    )


def gram_objective(gram: GramData, p, q) -> float:
    """Evaluate f(p, q) from the precomputed quadratic form (test reference)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pp = np.outer(p, p).ravel()
    qq = np.outer(q, q).ravel()
    # rows of sa_flat_t are already transposed-flat, so this is tr(G_B G_A)
    ga_t = gram.sa_flat_t @ qq
    f1 = float((gram.sb_flat.T @ pp) @ ga_t)
    f2 = float(p @ gram.cross @ q)
    return f1 - 2.0 * f2 + gram.t_norm_sq
