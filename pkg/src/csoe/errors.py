"""Exception hierarchy.

CLI exit codes map onto these: usage/config -> 1, data/parse -> 2,
numeric -> 3.
"""


class CsoeError(Exception):
    exit_code = 1


class ConfigError(CsoeError, ValueError):
    """Invalid hyperparameters or configuration values."""

    exit_code = 1


class UsageError(CsoeError):
    exit_code = 1


class DomainError(CsoeError, ValueError):
    """Inputs outside the mathematical domain of an operation."""

    exit_code = 2


class ParseError(CsoeError, ValueError):
    exit_code = 2


class GenerationError(CsoeError):
    """Synthetic data could not be generated under the given constraints."""

    exit_code = 2


class NumericError(CsoeError, ArithmeticError):
    """Non-convergence, non-finite values or singular systems."""

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SingularSupportError(NumericError):
    """The support Gram matrix cannot be inverted reliably."""


class DegenerateReconstructionError(NumericError):
    pass
