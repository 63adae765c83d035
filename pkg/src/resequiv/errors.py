"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised for shape mismatches, out-of-range indices and bad specs."""


class FormatError(ValueError):
    """Raised when a binary or CSV input does not follow its documented layout."""


class EmptyReportError(ValueError):
    """Raised when a measurement has no usable samples."""


class SizeLimitError(ValueError):
    """Raised when a materialized Jacobian would exceed the configured cap."""


class UnsupportedError(ValueError):
    """Raised for operations that have no defined result for the given kind."""
