"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A binary or text artifact failed to parse.

    Carries ``offset`` (bytes) or ``line`` (1-based) when known.
    """

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class PipelineStateError(RuntimeError):
    """A pipeline command was invoked before its prerequisites ran."""


class GradientEngineError(RuntimeError):
    """An operation on the render path has no registered adjoint."""
