"""Waveform container and 16-bit PCM WAV I/O.

Samples live in [-1, 1] as float64; producers clamp before constructing a
Waveform. Files are mono PCM16. Reading divides by 32768; writing scales by
32768 and clamps to the int16 range, so a write/read round trip moves no
sample by more than 1/32768 and full-scale 1.0 stores as 32767.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from emopoison.errors import AudioFormatError, UnsupportedEncodingError

DEFAULT_SAMPLE_RATE = 16000
CLIP_DURATION_S = 1.0

_INT16_FULL = 32768
_INT16_MAX = 32767


@dataclass(frozen=True)
class Waveform:
    """Immutable mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        peak = float(np.max(np.abs(samples)))
        if peak > 1.0:
            raise ValueError(f"samples exceed [-1, 1] (peak {peak:.6g})")
        if samples is not self.samples or samples.flags.writeable:
            samples = samples.copy()
            samples.setflags(write=False)
            object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples))))


def clamp_samples(samples: np.ndarray) -> np.ndarray:
    return np.clip(samples, -1.0, 1.0)


def quantize(w: Waveform) -> Waveform:
    """Snap samples onto the on-disk int16 grid (write/read round trip)."""
    ints = np.clip(np.round(w.samples * _INT16_FULL), -_INT16_FULL, _INT16_MAX)
    return Waveform(ints / _INT16_FULL, w.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read a mono PCM16 WAV file into a Waveform."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n_frames = fh.getnframes()
            raw = fh.readframes(n_frames)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated file") from exc
    if channels != 1:
        raise UnsupportedEncodingError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if len(raw) < 2 * n_frames:
        raise AudioFormatError(f"{path}: data chunk shorter than declared frame count")
    if n_frames == 0:
        raise AudioFormatError(f"{path}: empty data chunk")
    ints = np.frombuffer(raw, dtype="<i2", count=n_frames)
    return Waveform(ints.astype(np.float64) / _INT16_FULL, rate)


def write_wav(w: Waveform, path: str | Path) -> None:
    """Write a Waveform as mono PCM16."""
    ints = np.clip(np.round(w.samples * _INT16_FULL), -_INT16_FULL, _INT16_MAX)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.astype("<i2").tobytes())


def pad_or_trim(w: Waveform, duration_s: float) -> Waveform:
    """Zero-pad or cut the tail so the clip lasts exactly round(duration*rate) samples."""
    if duration_s <= 0.0:
        raise ValueError("duration_s must be positive")
    target = int(round(duration_s * w.sample_rate))
    if target <= 0:
        raise ValueError("target length must be positive")
    n = w.samples.size
    if n == target:
        return w
    if n > target:
        return Waveform(w.samples[:target], w.sample_rate)
    out = np.zeros(target, dtype=np.float64)
    out[:n] = w.samples
    return Waveform(out, w.sample_rate)
