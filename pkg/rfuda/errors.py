"""Exception hierarchy shared by the library and the CLI."""

from typing import Optional


class RfUdaError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for this error."""

    exit_code = 1


class ConfigError(RfUdaError):
    exit_code = 2


class UsageError(RfUdaError):
    exit_code = 2


class DimensionError(UsageError, ValueError):
    """Shape mismatch. ``axis`` names the offending dimension."""

    def __init__(self, message: str, axis: Optional[str] = None):
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(message)
        self.axis = axis


class DataError(RfUdaError):
    exit_code = 3


class FormatError(DataError):
    """Malformed tensor container. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset
        self.path = path


class LoadError(DataError):
    def __init__(self, message: str, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message}")
        self.path = path


class NumericalError(RfUdaError):
    """Non-finite loss. ``op`` names the first op that produced a non-finite value."""

    exit_code = 4

    def __init__(self, message: str, op: Optional[str] = None):
        if op is not None:
            message = f"{message}; first non-finite value produced by '{op}'"
        super().__init__(message)
        self.op = op
