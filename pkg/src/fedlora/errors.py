"""Exception hierarchy shared across the library.

Every error raised by public operations derives from FedLoraError so callers
(and the CLI exit-code mapping) can distinguish our failures from bugs.
"""

from __future__ import annotations


class FedLoraError(Exception):
    """Base class for all library errors."""


class InvalidDimensionsError(FedLoraError):
    """A requested shape or rank is impossible (e.g. r > min(k, d), size 0)."""


class ShapeMismatchError(FedLoraError):
    """Operands have incompatible shapes or ranks."""


class EmptyUpdateListError(FedLoraError):
    """Aggregation was called with no client updates."""


class FrozenViolationError(FedLoraError):
    """A client modified a matrix that the strategy requires to stay fixed."""


class SolverDivergedError(FedLoraError):
    """The coefficient solver produced a non-finite objective."""


class IntractableInstanceError(FedLoraError):
    """The brute-force oracle guard rejected the instance size."""


class NoConvergenceError(FedLoraError):
    """An underlying matrix factorization failed to converge."""


class InsufficientSamplesError(FedLoraError):
    """Not enough samples to give every client at least one."""


class TrainingDivergedError(FedLoraError):
    """Local training loss became non-finite (learning rate too high)."""


class EmptyTestSetError(FedLoraError):
    """Evaluation was requested on an empty test set."""


class InvalidSpecError(FedLoraError):
    """A task specification is internally inconsistent."""


class NonFiniteError(FedLoraError):
    """An exported matrix would contain NaN or Inf entries."""


class MissingArtifactsError(FedLoraError):
    """A run directory does not contain the expected output files."""


class ConfigError(FedLoraError):
    """Configuration file is malformed or fails validation.

    `field` names the offending key when known; `line` is the 1-based line
    number for parse errors.
    """

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line
