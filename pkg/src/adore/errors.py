"""Exception types shared across the package."""


class AdoreError(Exception):
    """Base class for all package errors."""


class DimensionError(AdoreError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(AdoreError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class CapacityError(AdoreError):
    """A position or size exceeds a configured maximum."""


class ContractViolation(AdoreError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(AdoreError):
    """Missing or inconsistent run configuration."""


class FormatError(AdoreError):
    """A serialized artifact is malformed."""
