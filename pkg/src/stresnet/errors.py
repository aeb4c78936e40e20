"""Exception types shared across the package."""


class StresnetError(Exception):
    """Base class for every error raised by this package."""


class PreconditionError(StresnetError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class FormatError(StresnetError, ValueError):
    """A file or serialized payload is malformed."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class AlignmentError(PreconditionError):
    """Two frame sequences that must line up do not."""


class TruncationError(StresnetError, IOError):
    """A raw video file holds fewer bytes than requested."""

    def __init__(self, path, expected, actual):
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: expected at least {expected} bytes, found {actual}")


class ConfigurationError(StresnetError, ValueError):
    """A run configuration cannot be executed as given."""
