"""Exception and warning types shared across the toolkit."""


class SpbaError(Exception):
    """Base class for all toolkit errors."""


class BehindCameraError(SpbaError):
    """A point projects with non-positive camera-frame depth."""


class DegenerateObjectiveError(SpbaError):
    """No usable residuals anywhere; the objective carries no information."""


class NoOverlapError(SpbaError):
    """Two depth maps share no valid pixel."""


class InconsistentDepthError(SpbaError):
    """Depth alignment produced a non-positive scale."""


class StationaryCameraError(SpbaError):
    """External camera motion is degenerate; scale is unobservable from poses."""


class InsufficientDataError(SpbaError):
    """Not enough exemplars / samples for the requested model size."""


class InvalidSpecError(SpbaError):
    """A synthetic-scene spec cannot be realized (e.g. object outside all frusta)."""


class InitFailureError(SpbaError):
    """The solver could not evaluate the objective at its starting point."""


class RetrievalFailureWarning(UserWarning):
    """Template retrieval matched the target mask only very weakly."""
