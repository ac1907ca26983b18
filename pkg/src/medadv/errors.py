"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent."""


class FormatError(ValueError):
    """A binary or text file does not follow its declared format."""


class TapeStateError(RuntimeError):
    """A gradient was requested from a tape that did not record operations."""
