"""Shared exception taxonomy for the hyve package."""


class HyveError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HyveError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(HyveError):
    """A primitive produced a NaN or Inf value."""


class ContractError(HyveError):
    """An operation was called outside its stated contract."""


class InputError(HyveError):
    """Caller-supplied data violates a precondition."""


class ConfigError(HyveError):
    """A configuration object is internally inconsistent."""


class FormatError(HyveError):
    """A file does not conform to its declared on-disk format."""


class UsageError(HyveError):
    """Invalid command-line flag combination."""
