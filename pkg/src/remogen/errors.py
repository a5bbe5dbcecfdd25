"""Exception hierarchy shared across the package."""


class RemogenError(Exception):
    """Base class for all package errors."""


class DimensionError(RemogenError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class NumericError(RemogenError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DegenerateInputError(RemogenError, ValueError):
    """Geometric input too degenerate to define a frame (e.g. stacked hips)."""


class EmptyInputError(RemogenError, ValueError):
    """An operation that needs at least one element received none."""


class ConfigError(RemogenError, ValueError):
    """Invalid configuration value, unknown key, or inconsistent setting."""


class FormatError(RemogenError, ValueError):
    """A file does not conform to its declared on-disk format."""


class CorruptArchiveError(FormatError):
    """Weight archive manifest and blob disagree (overlap, overflow, truncation)."""


class InsufficientFramesError(RemogenError, ValueError):
    """Too few frames for a finite-difference metric."""


class ProviderError(RemogenError, RuntimeError):
    """A per-segment context provider failed during rollout."""

    def __init__(self, segment_index: int, message: str = ""):
        self.segment_index = segment_index
        detail = f"context provider failed at segment {segment_index}"
        if message:
            detail = f"{detail}: {message}"
        super().__init__(detail)
