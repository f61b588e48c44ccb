"""Exception types raised across the package.

All of them derive from ValueError so callers that only care about
"bad input" can catch that.
"""


class DegenerateGeometryError(ValueError):
    """Landmarks do not define a usable transform (e.g. collinear points)."""


class InsufficientDataError(ValueError):
    """Too few training samples for the requested model."""


class ProtocolError(ValueError):
    """Evaluation protocol preconditions are not met."""


class ConfigError(ValueError):
    """Experiment configuration is inconsistent or incomplete."""


class DataError(ValueError):
    """Input data (manifest, image files, containers) is missing or malformed."""
