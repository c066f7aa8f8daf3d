"""Exception hierarchy shared across the package."""


class WarpstabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(WarpstabError, ValueError):
    """An argument violates a documented precondition."""


class ShapeMismatchError(InvalidInputError):
    """Two arrays that must agree in shape do not."""


class SingularMatrixError(WarpstabError, ValueError):
    """A transform that must be invertible is (numerically) singular."""


class DegenerateGeometryError(WarpstabError, ValueError):
    """Point configuration cannot determine the requested model (e.g. collinear)."""


class InsufficientPointsError(DegenerateGeometryError):
    """Fewer correspondences than the model needs."""


class NoModelError(WarpstabError, RuntimeError):
    """Robust estimation found no model with enough support."""


class NoValidRegionError(WarpstabError, ValueError):
    """No pixel stays valid across all warp fields, so nothing can be cropped."""


class WeightFormatError(WarpstabError, ValueError):
    """A weight or config file is corrupt, of the wrong version, or mismatched."""


class FrameIOError(WarpstabError, OSError):
    """A frame directory is missing, malformed, or unreadable."""
