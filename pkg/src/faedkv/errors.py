"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class ContextTooShortError(InvalidInputError):
    """Raised when a context is too short to carve out a compressible middle segment."""


class UnsupportedModeError(InvalidInputError):
    """Raised when an operation is called on a state whose mode it cannot handle."""
