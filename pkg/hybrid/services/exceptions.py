"""
Exception hierarchy shared by the hybrid SNN-ANN services.

Management commands map these onto the stable exit codes
(2 usage, 3 I/O, 4 numeric failure, 5 verification failure).
"""
from typing import Any, Dict, Iterable, Optional


class HybridError(Exception):
    """Base class for every error raised by the services."""


class DimensionError(HybridError, ValueError):
    """Tensor shapes do not fit the operation."""

    def __init__(self, message: str, *shapes: Iterable[int]):
        if shapes:
            rendered = ' vs '.join(str(tuple(s)) for s in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ContractError(HybridError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(HybridError, ValueError):
    """Configuration values are missing or inconsistent."""

    def __init__(self, message: str, missing_fields: Optional[Iterable[str]] = None):
        self.missing_fields = sorted(missing_fields or [])
        if self.missing_fields:
            message = f"{message} (missing: {', '.join(self.missing_fields)})"
        super().__init__(message)


class NumericError(HybridError, ArithmeticError):
    """Non-finite values appeared during a forward pass."""

    def __init__(self, message: str, layer: Optional[str] = None, timestep: Optional[int] = None):
        self.layer = layer
        self.timestep = timestep
        where = []
        if layer is not None:
            where.append(f"layer={layer}")
        if timestep is not None:
            where.append(f"timestep={timestep}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)


class ResourceError(HybridError, MemoryError):
    """A memory budget would be exceeded."""


class FormatError(HybridError):
    """A binary or text file does not follow its format."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class BuildError(HybridError):
    """A model description cannot be turned into a consistent layer chain."""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)


class DivergenceError(HybridError):
    """Training produced a non-finite loss.

    Carries the parameters of the last step whose loss was finite so the
    caller can still persist a usable checkpoint.
    """

    def __init__(self, message: str, last_finite_state: Optional[Dict[str, Any]] = None,
                 epoch: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.last_finite_state = last_finite_state
        self.epoch = epoch
        self.step = step


class VerificationError(HybridError):
    """A behavioral simulation disagreed with its software reference."""
