"""Exception hierarchy. The CLI maps each family to its own exit code."""


class AdvUnmixError(Exception):
    pass


class ConfigError(AdvUnmixError, ValueError):
    """Invalid configuration, arguments or hyperparameters."""


class DataError(AdvUnmixError):
    """Missing, unreadable or malformed input data."""


class FormatError(DataError):
    """A file does not follow the expected binary layout (bad magic, bad header)."""


class LengthError(DataError):
    """A file is shorter than its header promises."""


class IncompatibleCheckpointError(DataError):
    pass


class DimensionError(AdvUnmixError, ValueError):
    """Tensor shapes disagree with each other or with a model's architecture."""


class DivergenceError(AdvUnmixError, FloatingPointError):
    """A loss became NaN or infinite during training."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
