"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ContextLengthError(ValueError):
    """Sequence longer than the configured context window."""


class CodecError(ValueError):
    """Invalid trit value or corrupt packed buffer."""


class CapacityError(ValueError):
    """Model does not fit in the given memory budget."""


class ConfigError(ValueError):
    """Malformed configuration file or field value."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-incompatible checkpoint."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradients encountered during training."""
