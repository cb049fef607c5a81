"""Exception taxonomy shared by the whole package.

The CLI maps these onto process exit codes, so raising the right class is
part of the public contract:

  UsageError / ConfigError -> exit 1
  IOParseError             -> exit 2
  PropertyFailure          -> exit 3
"""


class CosalError(Exception):
    """Base class for all package errors."""


class ShapeError(CosalError):
    """Tensor shapes are incompatible with the requested operation."""


class ComputeError(CosalError):
    """Numerically invalid operation (division by zero, log of non-positive)."""


class UsageError(CosalError):
    """API or command invoked in a way its contract forbids."""


class ConfigError(UsageError):
    """Invalid configuration value or unknown config key."""


class IOParseError(CosalError):
    """File missing, unreadable, or malformed; carries a byte offset if known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PropertyFailure(CosalError):
    """A self-check property suite found a violated invariant."""
