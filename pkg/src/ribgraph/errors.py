"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: input/parse/config problems exit 2,
partial pipeline failures exit 3.
"""


class RibgraphError(Exception):
    """Base class for all toolkit errors."""


class ParseError(RibgraphError):
    """A file could not be parsed; message names the offending line/element."""


class ConfigError(RibgraphError):
    """Invalid or inconsistent configuration value."""


class DegenerateGeometryError(RibgraphError):
    """Geometry too degenerate for the requested operation (collinear,
    coincident, or ambiguous principal directions)."""


class BoundaryNotFoundError(RibgraphError):
    """Sternum boundary sweep never saw the overlap drop."""


class SegmentationError(RibgraphError):
    """Cartilage segmentation produced fewer parts than expected."""


class OrientationError(RibgraphError):
    """Level ordering of the two clouds is inconsistent; in-plane
    orientation cannot be disambiguated."""


class InsufficientSupportError(RibgraphError):
    """Too few points inside a waypoint's sphere region."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count
