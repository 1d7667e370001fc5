"""Emotion categories and the prosody presets attached to them.

The preset table drives both corpus synthesis and prosody conversion, so the
two sides agree on what "angry" sounds like. Values are free parameters tuned
for separability of the internal emotion recognizer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from types import MappingProxyType


class EmotionCategory(enum.IntEnum):
    """Canonical emotion set; enum order is the tie-break order everywhere."""

    NEUTRAL = 0
    ANGRY = 1
    SAD = 2
    SURPRISE = 3
    HAPPY = 4

    @property
    def label(self) -> str:
        return self.name.lower()


def emotion_from_name(name: str) -> EmotionCategory:
    try:
        return EmotionCategory[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown emotion name: {name!r}") from None


@dataclass(frozen=True)
class EmotionPreset:
    """Prosody parameters for one emotion.

    f0_base_hz        fundamental at the utterance midpoint
    f0_slope_hz_per_s linear F0 drift, centered on the midpoint
    f0_jitter         bounded fractional modulation of the F0 contour
    energy_gain       RMS gain relative to neutral speech
    rate_factor       duration multiplier relative to neutral speech
    """

    f0_base_hz: float
    f0_slope_hz_per_s: float
    f0_jitter: float
    energy_gain: float
    rate_factor: float

    def __post_init__(self) -> None:
        if self.f0_base_hz <= 0.0:
            raise ValueError("f0_base_hz must be positive")
        if self.energy_gain <= 0.0:
            raise ValueError("energy_gain must be positive")
        if self.rate_factor <= 0.0:
            raise ValueError("rate_factor must be positive")
        if not 0.0 <= self.f0_jitter < 0.5:
            raise ValueError("f0_jitter must lie in [0, 0.5)")

    @property
    def relative_f0_slope(self) -> float:
        """F0 slope normalized by the base, in 1/s. Used for energy reshaping."""
        return self.f0_slope_hz_per_s / self.f0_base_hz


DEFAULT_PRESETS: MappingProxyType[EmotionCategory, EmotionPreset] = MappingProxyType(
    {
        EmotionCategory.NEUTRAL: EmotionPreset(140.0, 0.0, 0.015, 1.0, 1.0),
        EmotionCategory.ANGRY: EmotionPreset(175.0, 20.0, 0.015, 1.6, 1.15),
        EmotionCategory.SAD: EmotionPreset(120.0, -15.0, 0.015, 0.7, 0.85),
        EmotionCategory.SURPRISE: EmotionPreset(195.0, 60.0, 0.015, 1.2, 1.0),
        EmotionCategory.HAPPY: EmotionPreset(180.0, 30.0, 0.015, 1.3, 1.10),
    }
)
