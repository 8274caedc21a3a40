"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed a value outside an operation's domain."""


class NumericFailure(ArithmeticError):
    """A computation produced or encountered non-finite values."""


class NoIntersection(ValueError):
    """A gaze ray never reaches the screen plane."""


class FormatError(ValueError):
    """A binary file did not parse; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    """A dataset manifest is inconsistent with the files on disk."""


class CheckpointMismatch(ValueError):
    """A checkpoint does not match the architecture it is loaded into."""

    def __init__(self, message: str, parameter: str):
        super().__init__(message)
        self.parameter = parameter


class ConfigError(ValueError):
    """A run configuration is malformed; ``line`` is 1-based when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.key = key
        self.line = line
