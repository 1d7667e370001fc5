"""Exception types shared across the pipeline."""


class AudioFormatError(ValueError):
    """Raised for malformed or truncated audio containers."""


class UnsupportedEncodingError(AudioFormatError):
    """Raised for well-formed audio files in an encoding we do not accept."""


class CapacityError(ValueError):
    """Raised when a selection asks for more items than a pool can provide."""


class ConfigError(ValueError):
    """Raised for invalid experiment configuration, message names the field path."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class ExternalConversionError(RuntimeError):
    """Raised when an external converter exchange is incomplete."""


class VerificationError(RuntimeError):
    """Raised when stored run artifacts fail re-derivation."""
