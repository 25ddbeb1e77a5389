"""Exception types raised across the package."""


class ActmemError(Exception):
    """Base class for every error raised by actmem."""


class ShapeError(ActmemError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ActmemError, ValueError):
    """A numeric parameter is outside its valid range."""


class ConfigurationError(ActmemError):
    """A graph, table or operator was wired up incorrectly."""


class VerificationError(ConfigurationError):
    """An in-place gradient rule failed its tolerance check."""

    def __init__(self, message, max_error=None, worst_point=None):
        super().__init__(message)
        self.max_error = max_error
        self.worst_point = worst_point


class TapeStateError(ActmemError, RuntimeError):
    """The tape was used in the wrong phase (e.g. recording after backward)."""


class LifecycleError(ActmemError, RuntimeError):
    """A stash was used after the tensors it depends on were freed."""


class DomainError(ActmemError, ValueError):
    """A value lies outside the image of the requested GELU branch."""


class FitError(ActmemError, RuntimeError):
    """The polynomial fit could not reach the requested tolerance."""


class TableFormatError(ActmemError, ValueError):
    """A serialized polynomial table is malformed or violates an invariant."""


class ConfigFileError(ActmemError, ValueError):
    """A ``key = value`` config file contains an unknown key or bad value."""


class DivergenceError(ActmemError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
