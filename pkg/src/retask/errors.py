"""Exception types shared across the package.

Each CLI failure class maps to a distinct exit code (see cli.EXIT_CODES).
"""


class RetaskError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RetaskError):
    """Invalid or inconsistent configuration values."""


class SequenceLengthError(RetaskError):
    """A token sequence exceeds the model's capacity."""


class VocabularyError(RetaskError):
    """A token id falls outside the vocabulary."""


class LayerRangeError(RetaskError):
    """A requested layer index does not exist."""


class DimensionError(RetaskError):
    """Matrix shapes do not conform."""


class BatchError(RetaskError):
    """A batch is too small or malformed for the requested loss."""


class InputError(RetaskError):
    """An operation received an empty or invalid input."""


class ParseError(RetaskError):
    """A generated coordinate string could not be parsed."""


class DataError(RetaskError):
    """A dataset is too small or structurally unusable."""


class TrainingError(RetaskError):
    """Training aborted; carries the partial history for diagnosis."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class EvaluationError(RetaskError):
    """A metric was asked to evaluate degenerate or mismatched inputs."""


class DegenerateInputError(RetaskError):
    """A similarity is undefined for the given inputs (e.g. all-zero matrix)."""


class StageError(RetaskError):
    """A pipeline stage is missing a prerequisite artifact."""
