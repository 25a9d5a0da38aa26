"""Benchmark the coefficient-solver kernels: numba backend vs numpy fallback.

Runs the Adam descent loop and the brute-force grid scan on representative
instance sizes under both backends, reports wall-clock medians, and checks
that the two implementations land on the same objective (they follow the
same update rule, so results agree to float rounding).

Usage: python3 benchmarks/backend_bench.py [--reps 20]
"""

from __future__ import annotations

import argparse
import os
import statistics
import time

import numpy as np

from fedlora.backend import ENV_VAR, available_backends
from fedlora.coeffsolver import (
    SolverConfig,
    brute_force_coefficients,
    solve_coefficients,
    warm_kernels,
)


def _instance(num_clients: int, k: int, d: int, r: int, seed: int):
    rng = np.random.default_rng(seed)
    b = rng.normal(size=(num_clients, k, r))
    a = rng.normal(size=(num_clients, r, d))
    w = rng.dirichlet(np.ones(num_clients))
    return b, a, w


def _time(fn, reps: int) -> float:
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) * 1e3  # ms


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=20)
    args = parser.parse_args()

    backends = available_backends()
    cfg = SolverConfig(steps=100)

    print(f"backends: {', '.join(backends)}   reps: {args.reps}")
    print()
    print(f"{'kernel':<28} {'instance':<22} " + " ".join(f"{b + ' (ms)':>12}" for b in backends) + "  agreement")

    for num_clients in (2, 10, 50):
        b, a, w = _instance(num_clients, 128, 128, 8, seed=num_clients)
        times = {}
        objectives = {}
        for backend in backends:
            os.environ[ENV_VAR] = backend
            warm_kernels()
            times[backend] = _time(lambda: solve_coefficients(b, a, w, cfg), args.reps)
            objectives[backend] = solve_coefficients(b, a, w, cfg).final_objective
        ref = objectives[backends[0]]
        spread = max(abs(objectives[x] - ref) for x in backends)
        agree = spread <= 1e-9 * max(abs(ref), 1.0)
        print(
            f"{'adam solve (100 steps)':<28} {f'U={num_clients} k=d=128 r=8':<22} "
            + " ".join(f"{times[x]:12.3f}" for x in backends)
            + f"  {'ok' if agree else f'SPREAD {spread:.2e}'}"
        )

    b, a, w = _instance(2, 16, 16, 4, seed=99)
    times = {}
    objectives = {}
    for backend in backends:
        os.environ[ENV_VAR] = backend
        warm_kernels()
        times[backend] = _time(
            lambda: brute_force_coefficients(b, a, w, grid_range=2.0, grid_steps=21),
            max(args.reps // 4, 1),
        )
        objectives[backend] = brute_force_coefficients(
            b, a, w, grid_range=2.0, grid_steps=21
        ).final_objective
    ref = objectives[backends[0]]
    spread = max(abs(objectives[x] - ref) for x in backends)
    agree = spread <= 1e-9 * max(abs(ref), 1.0)
    print(
        f"{'grid scan (21^4 points)':<28} {'U=2 k=d=16 r=4':<22} "
        + " ".join(f"{times[x]:12.3f}" for x in backends)
        + f"  {'ok' if agree else f'SPREAD {spread:.2e}'}"
    )
    os.environ.pop(ENV_VAR, None)


if __name__ == "__main__":
    main()
