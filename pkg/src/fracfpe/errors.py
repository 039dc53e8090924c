"""Exception hierarchy shared by every module."""


class FracFpeError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(FracFpeError):
    """Invalid experiment configuration.

    ``violations`` holds every ``(key, message)`` pair found, not just the first.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class StabilityError(ConfigError):
    """Explicit time step violates the stability precheck."""


class DomainError(FracFpeError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ContractError(FracFpeError):
    """Caller broke an interface contract (grid mismatch, negative sigma, ...)."""


class NumericalFailure(FracFpeError):
    """Quadrature, inversion or sampling did not converge."""


class IntegrityError(NumericalFailure):
    """Mass ledger or another runtime invariant was breached."""


class ResourceError(FracFpeError):
    """Requested work exceeds a configured cap."""


class RangeError(FracFpeError, ValueError):
    """Query lies outside the simulated horizon."""


class PathFailure(NumericalFailure):
    """A single simulated path produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
