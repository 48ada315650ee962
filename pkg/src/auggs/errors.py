"""Exception hierarchy shared by all auggs modules."""


class AugsError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(AugsError):
    """A numeric argument violates its documented domain (non-finite, out of range)."""


class ContractViolationError(AugsError):
    """Caller broke an API precondition (shape mismatch, stale cache, bad counts)."""


class RenderError(AugsError):
    """Rendering failed; the message names the offending Gaussian when known."""


class EmptyCloudError(InvalidParameterError):
    """An operation that needs at least one Gaussian received an empty cloud."""


class EmptyDepthError(InvalidParameterError):
    """A depth map had zero valid pixels where at least one was required."""


class LoadError(AugsError):
    """Dataset or file ingestion failed; the message names the entry or path."""


class FormatError(AugsError):
    """A binary artifact (PLY, DPTH) does not match its declared layout."""
