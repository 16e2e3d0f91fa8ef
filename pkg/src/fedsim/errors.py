"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(ValueError):
    """A dataset record or image is malformed."""


class ProtocolError(RuntimeError):
    """A federation-protocol contract was violated (key sets, fingerprints)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, corrupt, or from a different config."""
