class RacmcError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RacmcError, ValueError):
    pass


class BatchTooSmallError(DimensionError):
    pass


class ConfigError(RacmcError, ValueError):
    pass


class DataError(RacmcError, ValueError):
    pass


class ContractError(RacmcError, RuntimeError):
    """A caller violated an operation's precondition (e.g. backward on a non-scalar)."""
