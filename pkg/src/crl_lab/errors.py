"""Exception types shared across the laboratory."""


class CrlLabError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(CrlLabError, ValueError):
    """Input lies outside the declared domain of a map or density."""


class CycleError(CrlLabError, ValueError):
    """A graph operation would introduce (or found) a directed cycle."""


class CapacityError(CrlLabError, ValueError):
    """Requested problem size exceeds a hard combinatorial guard."""


class UnsupportedDensityError(CrlLabError, ValueError):
    """Density evaluation requested for a degenerate (point-mass) mechanism."""


class AbductionError(CrlLabError, ValueError):
    """Noise values cannot be recovered exactly from the evidence."""


class ConvergenceError(CrlLabError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularityError(CrlLabError, ValueError):
    """A Jacobian (or kernel system) is singular where it must not be."""


class DegenerateColumnError(CrlLabError, ValueError):
    """A data column has zero variance where correlation is required."""


class SampleSizeError(CrlLabError, ValueError):
    """Not enough samples to run the requested estimator."""


class SelectionError(CrlLabError, RuntimeError):
    """Model selection had no successfully fitted candidate."""


class ConfigError(CrlLabError, ValueError):
    """A configuration document is malformed or inconsistent."""


class DatasetFormatError(CrlLabError, ValueError):
    """A dataset file violates the expected on-disk format."""
