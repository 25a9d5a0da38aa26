"""Numerical backend selection.

The hot kernels (coefficient solver loop, brute-force grid scan) exist twice:
a numba-compiled version and a vectorized pure-numpy version. The environment
variable FEDLORA_BACKEND picks one at call time:

    FEDLORA_BACKEND=numba   use the compiled kernels (default when available)
    FEDLORA_BACKEND=numpy   force the numpy fallback

Selection is re-read on every dispatch so tests can flip the variable without
reloading modules. Results agree between backends up to floating-point
round-off; see benchmarks/backend_bench.py for timings and an agreement check.
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

ENV_VAR = "FEDLORA_BACKEND"

_KNOWN = ("numba", "numpy")


def available_backends() -> tuple[str, ...]:
    return _KNOWN if HAS_NUMBA else ("numpy",)


def active_backend() -> str:
    """Resolve the backend for the current call.

    Unset or empty -> numba when importable, else numpy. An explicit request
    for numba without the package installed is an error rather than a silent
    downgrade.
    """
    choice = os.environ.get(ENV_VAR, "").strip().lower()
    if not choice:
        return "numba" if HAS_NUMBA else "numpy"
    if choice not in _KNOWN:
        raise ValueError(f"unknown {ENV_VAR} value {choice!r}; expected one of {_KNOWN}")
    if choice == "numba" and not HAS_NUMBA:
        raise ValueError(f"{ENV_VAR}=numba requested but numba is not installed")
    return choice
