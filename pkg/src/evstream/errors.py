"""Exception types shared by the codec backends."""


class FormatError(ValueError):
    """Malformed or truncated wire data."""


class DependencyError(Exception):
    """A chained object cannot be decoded because its predecessor is missing."""
