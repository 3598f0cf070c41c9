"""Exception hierarchy shared across the toolkit."""


class F0TrackError(Exception):
    """Base class for all toolkit errors."""


class FormatError(F0TrackError):
    """A file does not match the expected on-disk format."""


class ParameterError(F0TrackError, ValueError):
    """A configuration or argument value is invalid."""


class DegenerateInputError(F0TrackError, ValueError):
    """Input data is valid in shape but numerically degenerate (e.g. silence)."""


class DimensionError(F0TrackError, ValueError):
    """Array shapes do not agree."""


class ParseError(F0TrackError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyBatchError(DegenerateInputError):
    """A mini-batch has no usable rows after filtering."""


class DivergenceError(F0TrackError, ArithmeticError):
    """Training produced a non-finite loss."""


class ModelMismatchError(F0TrackError, ValueError):
    """Input data does not match what a trained model expects."""


class AlignmentError(F0TrackError, ValueError):
    """Two contours were produced on different frame grids."""
