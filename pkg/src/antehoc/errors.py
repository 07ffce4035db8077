"""Exception hierarchy shared across the package."""


class AnteHocError(Exception):
    """Base class for all package errors."""


class ConfigError(AnteHocError, ValueError):
    """Invalid configuration (bad field, unknown backbone, inconsistent sizes)."""


class InputError(AnteHocError, ValueError):
    """Tensor argument of the wrong shape or with out-of-range values."""


class UnsupportedOperationError(AnteHocError, RuntimeError):
    """Operation not available for this model configuration."""


class CheckpointError(AnteHocError, RuntimeError):
    """Checkpoint file is corrupt, has the wrong version, or mismatches a request."""


class DataError(AnteHocError, ValueError):
    """Dataset manifest or attribute file could not be loaded."""


class TrainingError(AnteHocError, RuntimeError):
    """Training aborted (non-finite loss, empty dataset)."""


class EvaluationError(AnteHocError, ValueError):
    """Requested metric is incompatible with the model or dataset."""
