"""
Exception hierarchy shared by the cgflow library, the data layer and the CLI.

The command line maps these onto its exit codes: configuration problems
exit with 2, numerical and solver failures with 3.
"""

from typing import Optional


class CGFlowError(Exception):
    """Base class for every error raised by the library."""


class ShapeError(CGFlowError, ValueError):
    """Tensor shapes do not agree."""


class DomainError(CGFlowError, ValueError):
    """A scalar argument lies outside its admissible range."""


class ConfigError(CGFlowError, ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class DegenerateGeometryError(CGFlowError, ValueError):
    """Collinear samples, singular look-at frames and similar."""


class NumericalError(CGFlowError, RuntimeError):
    """Non-finite values, CFL violations or divergence.

    Attributes:
        stage: Name of the computation that failed (``"mpm"``, ``"phi_cf"``...)
        index: Substep or iteration index at which the failure was detected
    """

    def __init__(self, message: str, stage: Optional[str] = None, index: Optional[int] = None):
        self.stage = stage
        self.index = index
        super().__init__(message)


class StageError(CGFlowError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
