"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class BioliteError(Exception):
    category = "internal"
    exit_code = 5


class ShapeError(BioliteError, ValueError):
    category = "shape"
    exit_code = 5


class DataError(BioliteError, ValueError):
    category = "data"
    exit_code = 3


class FormatError(BioliteError, ValueError):
    category = "format"
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InternalError(BioliteError, RuntimeError):
    category = "internal"
    exit_code = 5
