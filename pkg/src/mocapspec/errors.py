"""Exception types shared across the package."""


class MocapSpecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MocapSpecError):
    """Array extents are incompatible with an operation."""


class ConfigError(MocapSpecError):
    """A configuration value violates its documented constraints."""


class DataError(MocapSpecError):
    """Stream or dataset contents violate a precondition."""


class ParseError(MocapSpecError):
    """A text file does not conform to its format; message carries the location."""


class FormatError(MocapSpecError):
    """A binary container is malformed, truncated, or of the wrong version."""


class ContractError(MocapSpecError):
    """An API was called in a way its contract forbids."""
