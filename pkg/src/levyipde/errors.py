"""Exception hierarchy.

``ConfigurationError`` covers invalid inputs and scenario files (CLI exit 1);
the numerical errors map to CLI exit 2.
"""


class LevyIPDEError(Exception):
    """Base class for package errors."""


class ConfigurationError(LevyIPDEError, ValueError):
    """Invalid user input: scenario files, dimensions, mismatched ensembles."""


class NumericalError(LevyIPDEError):
    """A numerical routine failed to produce a trustworthy result."""


class QuadratureError(NumericalError):
    pass


class SimulationError(NumericalError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class SolverError(NumericalError):
    def __init__(self, message, step=None, equation=None, condition=None):
        super().__init__(message)
        self.step = step
        self.equation = equation
        self.condition = condition


class ModelError(NumericalError):
    """A coefficient function returned a non-finite value."""
