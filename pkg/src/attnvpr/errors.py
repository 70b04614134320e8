"""Exception hierarchy shared across the package."""


class VPRError(Exception):
    """Base class for all package errors."""


class ShapeError(VPRError, ValueError):
    pass


class ValidationError(VPRError, ValueError):
    pass


class NormalizationError(ValidationError):
    """Raised when asked to L2-normalize a zero vector."""


class ConfigError(VPRError, ValueError):
    pass


class DegeneracyError(VPRError, ValueError):
    """Point configuration cannot determine a homography."""


class FormatError(VPRError):
    """Malformed or truncated binary container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(VPRError):
    """Training cannot proceed (diverged loss, nothing to mine)."""
