"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad field values, degenerate channel counts, etc."""


class ShapeError(ValueError):
    """Tensor shape violates an operation's contract."""


class DatasetError(ValueError):
    """Dataset directory or pairing is malformed."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is missing, inconsistent, or from another schema."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. because a loss became non-finite."""
