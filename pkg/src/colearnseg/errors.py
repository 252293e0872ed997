"""Exception taxonomy shared by every module; the CLI maps these to exit codes."""


class ColearnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ColearnError):
    """Tensor shapes are incompatible with the requested operation."""

    def __init__(self, message: str, expected=None, got=None):
        if expected is not None or got is not None:
            message = f"{message} (expected {expected}, got {got})"
        super().__init__(message)
        self.expected = expected
        self.got = got


class ConfigError(ColearnError):
    """A configuration value is invalid or unknown. CLI exit code 2."""


class DataError(ColearnError):
    """Input data violates a documented precondition. CLI exit code 3."""


class ContractError(ColearnError):
    """An API contract was violated by the caller."""


class DegenerateVarianceError(ContractError):
    """Batch statistics requested over a single element."""


class DivergenceError(ColearnError):
    """Training produced non-finite values. CLI exit code 4."""
