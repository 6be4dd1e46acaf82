"""
Error hierarchy for the malaria cell toolkit.

Everything derives from ValueError so callers that only care about
"bad input" can keep catching ValueError.
"""


class MalariaToolkitError(ValueError):
    """Base class for every error raised by the toolkit."""


class ShapeError(MalariaToolkitError):
    """Tensor shapes or dimensions do not fit the operation."""


class RangeError(MalariaToolkitError):
    """A value lies outside its admissible interval."""


class ParameterError(MalariaToolkitError):
    """An argument (rate, index range, dimension, layer name) is invalid."""


class NumericError(MalariaToolkitError):
    """Non-finite values reached an operation that requires finite input."""


class OracleError(MalariaToolkitError):
    """The finite-difference oracle saw a non-finite function value."""


class HarnessError(MalariaToolkitError):
    """Experiment harness misuse (empty data, empty matrix, empty log)."""


class CheckpointFormatError(MalariaToolkitError):
    """Checkpoint bytes are truncated, corrupt or of an unknown version."""


class CheckpointLoadError(MalariaToolkitError):
    """Checkpoint parameters do not fit the target topology."""


class IngestionError(MalariaToolkitError):
    """Manifest file missing or malformed."""


class SplitError(MalariaToolkitError):
    """Dataset cannot be split as requested."""


class PlanError(MalariaToolkitError):
    """Cross-validation plan cannot be built."""


class MetricError(MalariaToolkitError):
    """Metric undefined for the given predictions."""


class JoinError(MalariaToolkitError):
    """Predictions reference ids absent from the lookup table."""


class DegenerateStatisticsError(MalariaToolkitError):
    """Zero variance where a scale is required."""


class TrainingError(MalariaToolkitError):
    """A learner cannot be fitted on the given data."""


class PreparationError(MalariaToolkitError):
    """Raw dataset directory does not have the expected layout."""
