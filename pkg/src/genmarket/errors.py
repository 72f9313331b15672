"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration / input problems exit
with 2, numerical failures exit with 3.
"""


class GenmarketError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GenmarketError, ValueError):
    """Inputs have incompatible or unexpected dimensions."""


class DomainError(GenmarketError, ValueError):
    """An input is outside the mathematical domain of the operation."""


class ConfigError(GenmarketError, ValueError):
    """A scenario file, flag, or configuration value is malformed."""


class NumericError(GenmarketError, ArithmeticError):
    """A computation produced a numerically invalid result."""


class NearSingularError(NumericError):
    """A matrix that must be positive definite is (numerically) singular."""


class TrainingDivergedError(NumericError):
    """Optimization diverged; carries the epoch where it happened."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch
