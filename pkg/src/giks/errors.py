"""Exception types shared across the package."""


class GiksError(Exception):
    """Base class for all package errors."""


class DimensionError(GiksError, ValueError):
    pass


class DomainError(GiksError, ValueError):
    """A treatment (or other argument) lies outside its admissible range."""


class ContractError(GiksError, RuntimeError):
    pass


class TrainingError(GiksError, RuntimeError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message, block=None, diagnostics=None):
        super().__init__(message)
        self.block = block
        self.diagnostics = diagnostics or {}


class NoNeighborsError(GiksError, ValueError):
    pass


class NumericalError(GiksError, ArithmeticError):
    pass


class ConfigError(GiksError, ValueError):
    pass


class SpecError(GiksError, ValueError):
    """Invalid generator specification."""


class ParseError(GiksError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(GiksError, ValueError):
    pass


class UnavailableMetricError(GiksError, LookupError):
    """Metric needs a response oracle that the dataset does not carry."""
