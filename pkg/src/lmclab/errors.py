"""Exception types shared across the package."""


class LmcError(Exception):
    """Base class for all lmclab errors."""


class ShapeError(LmcError):
    """Tensor extents do not line up; the message names both shapes."""


class ParameterError(LmcError):
    """A scalar hyperparameter is outside its valid range."""


class ContractError(LmcError):
    """An API was called in a state its contract forbids."""


class DegenerateBatchError(LmcError):
    """A batch-statistics operation received an empty batch."""


class IngestError(LmcError):
    """A task/tensor file on disk is malformed; the message names the file."""


class ConfigError(LmcError):
    """An experiment config violates the schema; the message names the key."""


class CombineError(LmcError):
    """Two networks cannot be merged; the message names the layer at fault."""
