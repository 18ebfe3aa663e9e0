"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class TrainingError(RuntimeError):
    """Training diverged; carries the epoch in which it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
