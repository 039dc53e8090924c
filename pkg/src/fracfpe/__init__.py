"""Monte Carlo paths of subordinated jump SDEs and grid solvers for their
fractional Fokker-Planck equations."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DomainError, FracFpeError,  # noqa: E402
                     IntegrityError, NumericalFailure, PathFailure, RangeError,
                     ResourceError, StabilityError)

__all__ = [
    "ConfigError", "ContractError", "DomainError", "FracFpeError", "IntegrityError",
    "NumericalFailure", "PathFailure", "RangeError", "ResourceError", "StabilityError",
    "__version__",
]
