"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems -> 2,
missing artifacts -> 3, training failures -> 4.
"""


class MCLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MCLError):
    """Invalid configuration value or constraint violation."""


class DataFormatError(MCLError):
    """Malformed input file (bad magic, truncation, channel mismatch)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(MCLError):
    """Caller violated an operation precondition (shape, alignment, NaN)."""


class SamplingError(MCLError):
    """Batch planning cannot produce usable contrastive batches."""


class TrainingError(MCLError):
    """Non-finite loss or other failure during optimization."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class EvaluationError(MCLError):
    """Evaluation input is degenerate (e.g. single-class labels)."""


class MissingArtifactError(MCLError):
    """An expected experiment artifact is absent on disk."""
