"""Exception types shared across the package."""


class FaceFitError(Exception):
    """Base class for errors raised by facefit3d."""


class DegenerateGeometryError(FaceFitError, ValueError):
    """Point configuration too degenerate for a pose or alignment solve."""


class NumericalRankError(FaceFitError, ValueError):
    """A linear system was singular (rank-deficient with zero regularization)."""


class FormatError(FaceFitError, ValueError):
    """A serialized container failed to parse or validate.

    ``field`` names the offending header entry or array.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class VersionError(FormatError):
    """Container format version is not supported."""

    def __init__(self, found: int, expected: int):
        super().__init__("version", f"found {found}, expected {expected}")
        self.found = found
        self.expected = expected


class FingerprintMismatchError(FaceFitError, ValueError):
    """A cascade was paired with a model it was not trained against."""
