"""Desk-scale lab for poisoning speech classifiers with an emotion-conversion trigger."""

from emopoison.audio import Waveform, pad_or_trim, read_wav, write_wav
from emopoison.emotions import DEFAULT_PRESETS, EmotionCategory, EmotionPreset

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_PRESETS",
    "EmotionCategory",
    "EmotionPreset",
    "Waveform",
    "pad_or_trim",
    "read_wav",
    "write_wav",
    "__version__",
]
