"""Exception types shared across the package."""


class SceneFormatError(ValueError):
    """A scene file exists but its contents violate the documented format."""


class DegenerateGeometryError(ValueError):
    """A plane hypothesis or homography is degenerate (plane through the camera)."""


class PriorUnavailableError(RuntimeError):
    """No usable anchor subset / segmentation prior for the requested pixel."""


class SequenceRangeError(ValueError):
    """A disparity sequence would leave the valid inverse-depth range."""
