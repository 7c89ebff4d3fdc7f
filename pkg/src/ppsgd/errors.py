"""Exception types raised across the package."""


class PPSGDError(Exception):
    """Base class for all package errors."""


class ConfigError(PPSGDError, ValueError):
    """Invalid configuration, shapes, or parameters."""


class ParameterError(ConfigError):
    """A numeric parameter is outside its admissible range."""


class NumericError(PPSGDError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class RunError(PPSGDError, RuntimeError):
    """A training run could not proceed."""


class DivergedError(RunError):
    """An iterate became non-finite during training."""

    def __init__(self, round_index, message=None):
        self.round = int(round_index)
        super().__init__(message or f"iterate became non-finite at round {self.round}")


class StreamExhaustedError(RunError):
    """A finite one-pass sample stream ran out of samples."""


class IngestionError(PPSGDError, ValueError):
    """Malformed user data file."""

    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {reason}")


class QueryError(PPSGDError, LookupError):
    """A result-table query asked for something the table does not hold."""
