"""Exception types shared by every depthkit module."""


class DepthkitError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(DepthkitError, ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class DegenerateInputError(DepthkitError, ValueError):
    """Not enough valid data to evaluate an operation (empty mask overlap,
    all patches skipped, too few samples)."""


class UsageError(DepthkitError, ValueError):
    """An API or CLI contract was violated by the caller."""


class ParseError(DepthkitError, ValueError):
    """A file could not be parsed.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, *, path=None, offset=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)
        self.path = path
        self.offset = offset
