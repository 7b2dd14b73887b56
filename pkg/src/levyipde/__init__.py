"""Monte Carlo solver for semilinear integro-PDE systems driven by truncated jump measures."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    ModelError,
    NumericalError,
    QuadratureError,
    SimulationError,
    SolverError,
)
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "BACKEND",
    "ConfigurationError",
    "ModelError",
    "NumericalError",
    "QuadratureError",
    "SimulationError",
    "SolverError",
    "__version__",
]
