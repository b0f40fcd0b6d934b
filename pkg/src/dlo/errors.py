"""Exception hierarchy shared across the package."""


class DLOError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DLOError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DLOError, ValueError):
    """A configuration value violates its contract."""


class InputError(DLOError, ValueError):
    """Input data (e.g. token ids) is out of range."""


class InitError(DLOError, ValueError):
    """A weight-initialisation routine received degenerate input."""


class TrainingError(DLOError, RuntimeError):
    """A training step produced a non-finite loss.

    ``trace`` holds the route trace of the failing step for diagnostics.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(DLOError):
    """Base class for persisted-state failures."""


class NotACheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class TruncatedPayloadError(IntegrityError):
    pass


class OutputError(DLOError):
    """A run artefact (metrics, trace, lock) could not be written."""
