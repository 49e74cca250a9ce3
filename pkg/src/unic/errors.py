"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class FormatError(ValueError):
    """Malformed binary container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Non-finite loss encountered during training."""
