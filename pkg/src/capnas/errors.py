"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation problems exit 2,
numerical degeneracy exits 3.
"""


class CapnasError(Exception):
    """Base class for all package errors."""


class ValidationError(CapnasError, ValueError):
    """A configuration, architecture or file does not match its schema."""

    def __init__(self, message, *, dimension=None, line=None):
        self.dimension = dimension
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedSpaceError(CapnasError):
    """The operation cannot be applied to this kind of search space."""


class SpaceTooLargeError(CapnasError):
    def __init__(self, size, cap):
        self.size = size
        self.cap = cap
        super().__init__(f"search space has {size} architectures, above the cap of {cap}")


class NumericalError(CapnasError, ArithmeticError):
    """A numerical routine failed or its input was outside its domain."""


class DegenerateInputError(NumericalError):
    """Statistic undefined for the input (e.g. every value tied)."""


class OptimizationError(NumericalError):
    pass


class SetupError(CapnasError):
    """A search run cannot start with the given configuration."""
