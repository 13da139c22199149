"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, enum values or parameter ranges."""


class NumericError(ArithmeticError):
    """Non-finite values produced during a computation."""


class ParseError(ValueError):
    """Malformed input file (IDX payloads, checkpoints)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
