"""Exception types shared across the package."""


class NasTcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NasTcError):
    """Invalid shapes, incompatible settings, or bad user configuration."""


class NumericError(NasTcError):
    """Non-finite values or a diverged optimization."""


class FormatError(NasTcError):
    """Malformed genotype / feature / weight files.

    ``offset`` is the byte position of the problem for binary formats,
    ``location`` a JSON-pointer-ish path for text formats.
    """

    def __init__(self, message: str, *, offset: int | None = None,
                 location: str | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.offset = offset
        self.location = location


class UsageError(NasTcError):
    """API misuse, e.g. backward on a non-scalar."""
