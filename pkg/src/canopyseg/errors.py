"""Exception hierarchy shared by every stage of the pipeline."""


class CanopySegError(Exception):
    """Base class for all canopyseg errors."""


class IoError(CanopySegError, OSError):
    """A file could not be read or written."""


class FormatError(CanopySegError, ValueError):
    """A file exists but its content is malformed or unsupported."""


class DimensionError(CanopySegError, ValueError):
    pass


class ArgumentError(CanopySegError, ValueError):
    pass


class ShapeError(CanopySegError, ValueError):
    pass


class StateError(CanopySegError, RuntimeError):
    pass


class ConfigError(CanopySegError, ValueError):
    pass


class DataError(CanopySegError, ValueError):
    pass


class DegenerateError(CanopySegError, ZeroDivisionError):
    """A rate was requested whose denominator is zero."""
