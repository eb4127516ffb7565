"""Exception types shared across the toolkit."""


class ShapeMismatchError(ValueError):
    """Operands or gradients have incompatible shapes."""


class ConstantInputError(ValueError):
    """Correlation requested on a constant sequence; the value is undefined."""


class DataError(ValueError):
    """Invalid or malformed input data (bad labels, out-of-range gold, ...)."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, bad stage order)."""


class CheckpointError(ValueError):
    """Checkpoint container cannot be read or written."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported (newer) format version."""
