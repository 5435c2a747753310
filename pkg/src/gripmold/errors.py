"""Exception hierarchy shared across the package."""


class GripmoldError(Exception):
    """Base class for all package errors."""


class ContractError(GripmoldError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class AggregationError(ContractError):
    """A scatter/gather index is out of range."""


class NumericError(GripmoldError):
    """A computation produced non-finite values."""


class DomainError(GripmoldError):
    """Geometry does not fit inside the simulation domain."""


class EscapeError(NumericError):
    """A particle left the background grid."""


class ActionBoundsError(ContractError):
    """A grip action lies outside its configured bounds."""


class EmptyCloudError(GripmoldError):
    """A point-cloud stage received or produced no usable points."""


class EmptyInteriorError(EmptyCloudError):
    """Interior sampling found no points inside the reconstructed surface."""


class ConfigError(GripmoldError):
    """A configuration value is invalid or inconsistent."""
