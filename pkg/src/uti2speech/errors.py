"""Exception types shared across the pipeline."""


class Uti2SpeechError(Exception):
    """Base class for all pipeline errors."""


class MalformedFileError(Uti2SpeechError):
    """A data file does not match its declared layout."""


class ConfigurationError(Uti2SpeechError):
    """A required configuration key or file is missing or invalid."""


class InsufficientDataError(Uti2SpeechError):
    """Not enough material to perform the requested split or fit."""


class NumericInputError(Uti2SpeechError):
    """Non-finite or otherwise unusable numeric input."""


class InsufficientAudioError(Uti2SpeechError):
    """Audio is too short for the requested analysis."""


class DegenerateStatsError(Uti2SpeechError):
    """Normalization statistics contain a zero standard deviation."""


class IncompatibleInputError(Uti2SpeechError):
    """Two inputs that must agree (shape, sample rate, sentence set) do not."""


class ShapeError(Uti2SpeechError):
    """A tensor does not have the shape the operation requires."""


class BackendMissingError(Uti2SpeechError):
    """The external vocoder backend was selected but is not configured."""


class DivergenceError(Uti2SpeechError):
    """Training produced a non-finite loss."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
