"""Exception taxonomy shared across the library.

Every error raised on purpose is one of these, so callers (and the CLI)
can distinguish a bad configuration from bad data or a numeric blow-up.
"""


class CoreasonError(Exception):
    """Base class for all deliberate errors."""


class ShapeError(CoreasonError):
    """Operand shapes do not conform (message names both shapes)."""


class ConfigError(CoreasonError):
    """Invalid configuration value caught at construction time."""


class InputError(CoreasonError):
    """Invalid argument to an operation (bad label, empty sequence, ...)."""


class DataError(CoreasonError):
    """A dataset record violates its invariants."""


class ParseError(CoreasonError):
    """A serialized file could not be decoded (message carries position)."""


class NumericError(CoreasonError):
    """A non-finite value appeared where the contract forbids it."""


class StageError(CoreasonError):
    """A model stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
