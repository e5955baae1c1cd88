"""Exception hierarchy shared across the package."""


class IsokannError(Exception):
    """Base class for all package errors."""


class CatalogError(IsokannError, KeyError):
    """Unknown benchmark system name."""

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NonFiniteError(IsokannError, ValueError):
    """A non-finite value entered a numerical update."""


class DivergenceError(IsokannError, FloatingPointError):
    """A trajectory left the finite/bounded region.

    ``step`` is the index of the first offending state, ``shot`` the
    ``(point_index, replica_index)`` pair when known.
    """

    def __init__(self, message, step=None, shot=None):
        super().__init__(message)
        self.step = step
        self.shot = shot


class DimensionError(IsokannError, ValueError):
    """Input dimension does not match the model or system."""


class DegeneracyError(IsokannError, ValueError):
    """Values collapsed to a constant (no usable spectral information)."""


class EstimateError(IsokannError, RuntimeError):
    """No usable Monte Carlo samples were produced."""


class RegimeError(IsokannError, ValueError):
    """Parameters outside the metastable regime (need 0 < a < 1)."""


class ConvergenceError(IsokannError, RuntimeError):
    """An iteration did not converge within its budget."""


class CheckpointError(IsokannError, ValueError):
    """Malformed, truncated or incompatible checkpoint payload."""


class ConfigError(IsokannError, ValueError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
