"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Tensor dimensions do not line up; message names the offending axis."""


class ConfigError(ValueError):
    """A structural or hyperparameter setting is invalid."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward twice)."""


class FormatError(ValueError):
    """A serialized file is malformed; carries the byte offset of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(ValueError):
    """A dataset directory or split request is unusable."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""
