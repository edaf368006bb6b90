"""Exception hierarchy shared across the package.

Everything raised on purpose derives from MilbagError so the CLI can turn
domain failures into clean exit messages instead of tracebacks.
"""


class MilbagError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(MilbagError):
    """A documented precondition was violated by the caller."""


class DimensionError(MilbagError):
    """Tensor shapes are incompatible with the requested operation."""


class EmptyBagError(MilbagError):
    """An operation that needs at least one instance received none."""


class SliceGeometryError(MilbagError):
    """A slice does not cover the expected patch grid."""


class FormatError(MilbagError):
    """A serialized file is malformed.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(MilbagError):
    """A configuration value is invalid or inconsistent."""
