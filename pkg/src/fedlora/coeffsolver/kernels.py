"""Hot kernels for the coefficient solve, in two interchangeable flavors.

`adam_loop_*` runs the Adam descent over the Gram-space objective; at U=10,
r=8 a 100-step solve is ~26k fused multiply-adds per step, far below the cost
of touching the k x d matrices. `grid_scan_*` exhaustively evaluates the
objective on a coefficient grid (the brute-force oracle for tiny instances).

The Adam loop is one source function: the numba backend runs it compiled
(cache=True, so the first process to touch it pays the JIT cost once), the
numpy backend runs the identical statements interpreted. Its contractions are
flat GEMVs either way; compilation only removes the per-step dispatch
overhead, so the two backends agree to rounding. The grid scan has a real
hand-written numpy twin (chunked unravel_index) next to the compiled digit
loop. Dispatch lives in solver.py and follows fedlora.backend.active_backend().

Both flavors evaluate the objective before the first update (trace index 0)
and return the best iterate seen, so the returned objective can never exceed
the initial one. A non-finite objective aborts the loop with status -1.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _adam_loop_impl(
    sb_flat,
    sa_flat,
    sb_flat_t,
    sa_flat_t,
    cross,
    t_norm_sq,
    p0,
    q0,
    steps,
    lr,
    beta1,
    beta2,
    eps,
):
    num_clients = p0.shape[0]

    p = p0.copy()
    q = q0.copy()
    cross_t = cross.T.copy()
    mp = np.zeros(num_clients)
    vp = np.zeros(num_clients)
    mq = np.zeros(num_clients)
    vq = np.zeros(num_clients)
    trace = np.zeros(steps + 1)
    best_p = p.copy()
    best_q = q.copy()
    best = np.inf

    for t in range(steps + 1):
        pp = np.outer(p, p).ravel()
        qq = np.outer(q, q).ravel()
        # rows of the *_t arrays carry the (a,b)->(b,a) permutation, so
        # sb_flat @ ga_t is KB[u,v] = tr(S_B[u,v] G_A), and likewise KA
        ga_t = sa_flat_t @ qq
        gb_t = sb_flat_t @ pp
        kb = sb_flat @ ga_t
        ka = sa_flat @ gb_t
        cq = cross @ q
        cp = cross_t @ p
        f = float(pp @ kb) - 2.0 * float(p @ cq) + t_norm_sq
        trace[t] = f
        if not np.isfinite(f):
            return best_p, best_q, trace[: t + 1], best, -1
        if f < best:
            best = f
            best_p = p.copy()
            best_q = q.copy()
        if t == steps:
            break

        step = t + 1
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        # both gradients read the pre-step (p, q); the update is simultaneous
        gp = 2.0 * (kb.reshape(num_clients, num_clients) @ p - cq)
        gq = 2.0 * (ka.reshape(num_clients, num_clients) @ q - cp)
        mp = beta1 * mp + (1.0 - beta1) * gp
        vp = beta2 * vp + (1.0 - beta2) * gp * gp
        mq = beta1 * mq + (1.0 - beta1) * gq
        vq = beta2 * vq + (1.0 - beta2) * gq * gq
        p = p - lr * (mp / bc1) / (np.sqrt(vp / bc2) + eps)
        q = q - lr * (mq / bc1) / (np.sqrt(vq / bc2) + eps)

    return best_p, best_q, trace, best, steps


adam_loop_numba = njit(cache=True, nogil=True)(_adam_loop_impl) if HAS_NUMBA else None

adam_loop_numpy = _adam_loop_impl


def _grid_scan_impl(sb_flat, sa_flat_perm, cross, t_norm_sq, grid_values, num_clients):
    rr = sb_flat.shape[1]
    uu = num_clients * num_clients
    g = grid_values.shape[0]
    axes = 2 * num_clients
    total = 1
    for _ in range(axes):
        total *= g

    coords = np.zeros(axes)
    gb = np.zeros(rr)
    ga = np.zeros(rr)
    best = np.inf
    best_p = np.zeros(num_clients)
    best_q = np.zeros(num_clients)

    for idx in range(total):
        tmp = idx
        for axis in range(axes - 1, -1, -1):
            coords[axis] = grid_values[tmp % g]
            tmp //= g
        # coords = [p_0..p_{U-1}, q_0..q_{U-1}]
        for j in range(rr):
            gb[j] = 0.0
            ga[j] = 0.0
        for u in range(num_clients):
            pu = coords[u]
            qu = coords[num_clients + u]
            for v in range(num_clients):
                w1 = pu * coords[v]
                w2 = qu * coords[num_clients + v]
                base = u * num_clients + v
                for j in range(rr):
                    gb[j] += w1 * sb_flat[base, j]
                    ga[j] += w2 * sa_flat_perm[base, j]
        f1 = 0.0
        for j in range(rr):
            f1 += gb[j] * ga[j]
        f2 = 0.0
        for u in range(num_clients):
            acc = 0.0
            for v in range(num_clients):
                acc += cross[u, v] * coords[num_clients + v]
            f2 += coords[u] * acc
        f = f1 - 2.0 * f2 + t_norm_sq
        if f < best:
            best = f
            for u in range(num_clients):
                best_p[u] = coords[u]
                best_q[u] = coords[num_clients + u]

    return best_p, best_q, best


grid_scan_numba = njit(cache=True, nogil=True)(_grid_scan_impl) if HAS_NUMBA else None


def grid_scan_numpy(
    sb_flat,
    sa_flat_perm,
    cross,
    t_norm_sq,
    grid_values,
    num_clients,
    chunk: int = 65536,
):
    """Chunked vectorized scan; identical tie-breaking (first linear index)."""
    g = grid_values.shape[0]
    axes = 2 * num_clients
    total = g**axes
    dims = (g,) * axes

    best = np.inf
    best_p = np.zeros(num_clients)
    best_q = np.zeros(num_clients)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.array(np.unravel_index(idx, dims))  # (axes, m)
        coords = grid_values[digits]
        pc = coords[:num_clients].T  # (m, U)
        qc = coords[num_clients:].T
        pp = (pc[:, :, None] * pc[:, None, :]).reshape(len(idx), -1)
        qq = (qc[:, :, None] * qc[:, None, :]).reshape(len(idx), -1)
        f1 = np.einsum("mj,mj->m", pp @ sb_flat, qq @ sa_flat_perm)
        f2 = np.einsum("mu,mu->m", pc @ cross, qc)
        f = f1 - 2.0 * f2 + t_norm_sq
        i = int(np.argmin(f))
        if f[i] < best:
            best = float(f[i])
            best_p = pc[i].copy()
            best_q = qc[i].copy()

    return best_p, best_q, best
