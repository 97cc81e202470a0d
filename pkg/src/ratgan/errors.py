"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """An operation received a tensor or value violating its preconditions."""


class InvalidConfigError(ValueError):
    """A configuration is internally inconsistent or out of range."""


class CheckpointVersionError(RuntimeError):
    """A checkpoint file was written by an incompatible format version."""
