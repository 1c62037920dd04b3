"""Exception types raised across the pipeline."""


class DenverError(Exception):
    """Base class for all pipeline errors."""


class InputError(DenverError):
    """Malformed or inconsistent input data."""


class FormatError(DenverError):
    """A file does not follow its binary layout."""


class NumericError(DenverError):
    """Non-finite values where finite ones are required.

    ``checkpoint`` optionally carries the last finite state of an
    optimisation loop so callers can resume or inspect it.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConfigError(DenverError):
    """Invalid configuration values."""


class RangeError(DenverError):
    """An evaluation point lies outside a field's domain."""


class StageOrderError(DenverError):
    """A pipeline stage was run before its predecessors produced outputs."""
