"""Exception types shared across the package."""


class ProtohierError(Exception):
    """Base class for every error raised by this package."""


class FormatError(ProtohierError):
    """File magic or header does not match the expected layout."""


class DataError(ProtohierError):
    """Payload is structurally readable but the values are unusable."""


class IoError(ProtohierError):
    """Underlying read or write failed."""


class ConfigError(ProtohierError):
    """A configuration value breaks a documented precondition."""


class ShapeError(ProtohierError):
    """Array dimensions do not agree."""


class MathError(ProtohierError):
    """Numerically undefined operation, e.g. a zero-norm vector."""


class StateError(ProtohierError):
    """Operation needs state that is not present (backward before forward)."""


class DivergenceError(ProtohierError):
    """Training produced a non-finite loss.

    ``last_state`` carries the most recent finite model state so a run can
    be inspected or restarted from the epoch before the blow-up.
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
