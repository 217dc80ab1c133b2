"""Exception hierarchy shared by every module.

The CLI maps ``ConfigError`` subclasses to exit code 2 and every other
``UpcycleError`` to exit code 3.
"""


class UpcycleError(Exception):
    """Base class for all library errors."""


class ConfigError(UpcycleError, ValueError):
    """Invalid configuration, manifest, or argument combination."""


class ShapeError(UpcycleError, ValueError):
    pass


class NumericError(UpcycleError, FloatingPointError):
    pass


class StateError(UpcycleError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class CapacityError(UpcycleError):
    """Model weights do not fit in the available accelerator memory."""

    def __init__(self, message: str, shortfall_bytes: float):
        super().__init__(message)
        self.shortfall_bytes = shortfall_bytes


class TableLookupError(UpcycleError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DomainError(UpcycleError, ValueError):
    pass


class LengthError(UpcycleError, ValueError):
    pass


class PairingError(UpcycleError, ValueError):
    pass


class TrainingDiverged(UpcycleError):
    """Loss became non-finite; ``last_good`` holds the checkpoint before the bad step."""

    def __init__(self, message: str, last_good, metrics=None):
        super().__init__(message)
        self.last_good = last_good
        self.metrics = metrics


class StageError(UpcycleError):
    """A manifest stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
