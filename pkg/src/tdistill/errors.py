"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class DegenerateFitError(ValueError):
    """Time-series fit cannot be solved (e.g. singular regressors)."""


class CheckpointError(ValueError):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


class IdxFormatError(ValueError):
    """IDX file has a malformed header or wrong magic."""


class IdxLengthError(ValueError):
    """IDX file is shorter than its header promises."""
