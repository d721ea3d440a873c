"""Exception hierarchy shared by the library and the command line.

Each error class carries the process exit code the CLI maps it to.
"""


class BridgeError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(BridgeError, ValueError):
    """Invalid configuration, file format or parameter range."""

    exit_code = 2


class ExpressionSyntaxError(ConfigError):
    """Coefficient source text could not be parsed."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class NumericError(BridgeError, ArithmeticError):
    """Numerical failure: non-convergence, NaN states, invalid kernels."""

    exit_code = 3


class DomainError(NumericError):
    """An expression or control was evaluated outside its domain."""


class ModelError(NumericError):
    """A model coefficient violated an invariant when evaluated (e.g. negative rate)."""


class UnsupportedModelError(BridgeError):
    """The requested operation is not available for this model family."""

    exit_code = 4
