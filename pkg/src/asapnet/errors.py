class ConfigurationError(ValueError):
    """Shapes, factors or config keys that cannot work together."""


class UsageError(RuntimeError):
    """API misuse, e.g. a backward pass fed a cache from another forward."""


class DataError(ValueError):
    """Invalid data content such as out-of-range label indices."""


class FormatError(IOError):
    """Unreadable or version-mismatched files."""
