"""Exception hierarchy shared by all patchlikely modules."""


class PatchLikelyError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PatchLikelyError):
    """Operands have incompatible shapes; the message names both."""


class GraphError(PatchLikelyError):
    """Invalid use of the recorded-computation engine (non-scalar loss,
    unsupported operation, tape mixing)."""


class NumericsError(PatchLikelyError):
    """A numeric contract was violated (NaN/Inf, singular matrix, bad range)."""


class ImageFormatError(PatchLikelyError):
    """An image file could not be decoded, or uses an unsupported format."""


class CheckpointError(PatchLikelyError):
    """A checkpoint file is corrupt, truncated, or of an unsupported version."""


class ConfigError(PatchLikelyError):
    """A configuration value or file is invalid."""
