"""Exception types shared across the package.

Each carries the CLI exit code it maps to, so the front end can translate
failures without inspecting messages.
"""


class DerotError(Exception):
    exit_code = 2


class ShapeError(DerotError, ValueError):
    pass


class DataError(DerotError):
    pass


class NumericalError(DerotError, ArithmeticError):
    exit_code = 3


class NonFiniteError(NumericalError):
    pass


class NormalizationDegenerate(NumericalError):
    """Raised when a pose vector with c = s = 0 is normalized."""


class CoverageError(DataError):
    def __init__(self, message, uncovered=()):
        super().__init__(message)
        self.uncovered = list(uncovered)


class ConfigError(DerotError):
    exit_code = 1


class ProvenanceError(DataError):
    """An artifact was produced under a different resolved configuration."""
