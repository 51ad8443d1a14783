"""Exception types shared across the package."""


class VidflowError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VidflowError, ValueError):
    """Tensor or grid extents violate an operation's shape contract."""


class ConfigError(VidflowError, ValueError):
    """A configuration value is out of its documented range."""


class ContractError(VidflowError, RuntimeError):
    """An API precondition was violated by the caller."""


class NumericalError(VidflowError, ArithmeticError):
    """A computation produced non-finite values."""


class ProtocolError(VidflowError, ValueError):
    """A wire frame failed to parse; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset
