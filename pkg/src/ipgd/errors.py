"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: dimension mismatch, bad hyperparameter, bad partition."""


class DivergenceError(ArithmeticError):
    """An iterate became non-finite or left the divergence radius."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class IngestError(IOError):
    """A dataset file is malformed or truncated."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
