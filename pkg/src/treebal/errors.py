"""Exception types shared across the package."""


class TreebalError(Exception):
    """Base class for all package-specific errors."""


class InvalidSpecError(TreebalError, ValueError):
    """A configuration or generation spec is ill-formed."""


class TruthUnavailableError(TreebalError, RuntimeError):
    """True potential outcomes were requested for data that has none."""


class DimensionError(TreebalError, ValueError):
    """Array shapes are inconsistent with the fitted model or sample."""


class DataFormatError(TreebalError, ValueError):
    """An external data file violates the documented format."""


class SolverError(TreebalError, RuntimeError):
    """An iterative solver failed to produce a usable result."""
