"""Exception hierarchy shared across the package."""


class DiffemError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffemError):
    """Invalid configuration, flags, or file formats."""


class NumericalError(DiffemError):
    """Base class for runtime numerical failures (CLI exit code 3)."""


class DimensionMismatchError(NumericalError):
    def __init__(self, message, expected=None, got=None):
        if expected is not None:
            message = f"{message} (expected {expected}, got {got})"
        super().__init__(message)
        self.expected = expected
        self.got = got


class DomainError(NumericalError):
    """Argument outside the mathematically valid domain."""


class NonFiniteError(NumericalError):
    """NaN or Inf encountered; `where` identifies the failing stage."""

    def __init__(self, message, where=None, iteration=None):
        super().__init__(message)
        self.where = where
        self.iteration = iteration


class NotSpdError(NumericalError):
    """Matrix expected symmetric positive definite is not."""

    def __init__(self, message, pivot_index=None):
        super().__init__(message)
        self.pivot_index = pivot_index


class SolverDivergedError(NumericalError):
    """Iterative solver produced a non-finite residual."""

    def __init__(self, message, mode=None, iteration=None):
        super().__init__(message)
        self.mode = mode
        self.iteration = iteration


class EmptyDatasetError(DiffemError):
    """Operation requires at least one record or sample."""


class LowEffectiveSampleSizeError(NumericalError):
    """Importance weights collapsed; caller should increase proposal count."""

    def __init__(self, message, ess=None, n_proposals=None):
        super().__init__(message)
        self.ess = ess
        self.n_proposals = n_proposals
