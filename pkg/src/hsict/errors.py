class HsictError(Exception):
    """Base class for library errors."""


class DimensionError(HsictError, ValueError):
    """Tensor shapes do not line up."""


class ConfigError(HsictError, ValueError):
    """Invalid configuration or parameter layout."""


class CheckpointFormatError(HsictError, ValueError):
    """Checkpoint magic, version or config echo does not match."""


class TruncatedCheckpointError(HsictError, OSError):
    """Checkpoint file ended before all records were read."""


class TrainingAbort(HsictError, RuntimeError):
    """Training hit a non-finite loss or gradient."""


class GradCheckFailure(HsictError, AssertionError):
    """Analytic and finite-difference gradients disagree."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
