"""Exception hierarchy shared across the package."""

from __future__ import annotations


class QLossError(Exception):
    """Base class for all package errors."""


class LayoutError(QLossError, ValueError):
    pass


class SimulationError(QLossError, ValueError):
    pass


class ResourceLimitError(QLossError):
    """Raised instead of silently truncating an oversized request."""


class FormatError(QLossError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedStreamError(FormatError):
    pass


class GraphConstructionError(QLossError):
    """A single fault produced a non-graphlike detector pattern."""


class NumericalAbort(QLossError):
    """Non-finite loss or divergence during training."""
