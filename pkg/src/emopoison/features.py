"""Spectral and prosodic feature extraction.

Framing convention everywhere: periodic Hann window, frames start at sample 0
and advance by the hop, so n_frames = 1 + floor((len - win) / hop). Default
front end is win 400 / hop 160 at 16 kHz, which turns a 1 s clip into 98
frames; the mel bank has 40 HTK-scale triangles with peak weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from emopoison.audio import Waveform

DEFAULT_WIN_LENGTH = 400
DEFAULT_HOP_LENGTH = 160
DEFAULT_N_MELS = 40
DEFAULT_F_MIN = 0.0
DEFAULT_F_MAX = 8000.0
LOG_FLOOR = 1e-10

F0_MIN_HZ = 60.0
F0_MAX_HZ = 400.0
VOICING_THRESHOLD = 0.3
F0_FRAME_LENGTH = 640
F0_HOP_LENGTH = 160


def hann_window(win_length: int) -> np.ndarray:
    """Periodic Hann window of the given length."""
    n = np.arange(win_length, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)


def frame_count(n_samples: int, win_length: int, hop_length: int) -> int:
    return 1 + (n_samples - win_length) // hop_length


def frame_signal(x: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    """Slice x into overlapping frames, shape (n_frames, win_length)."""
    if win_length <= 0 or hop_length <= 0:
        raise ValueError("win_length and hop_length must be positive")
    if win_length > x.size:
        raise ValueError(f"win_length {win_length} exceeds signal length {x.size}")
    n_frames = frame_count(x.size, win_length, hop_length)
    view = np.lib.stride_tricks.sliding_window_view(x, win_length)
    return np.ascontiguousarray(view[:: hop_length][:n_frames])


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, shape (n_frames, win_length // 2 + 1)."""

    frames: np.ndarray
    win_length: int
    hop_length: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.frames.shape[1])

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def bin_frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.win_length, 1.0 / self.sample_rate)


def stft(
    w: Waveform,
    win_length: int = DEFAULT_WIN_LENGTH,
    hop_length: int = DEFAULT_HOP_LENGTH,
) -> Spectrogram:
    """Short-time Fourier transform with a periodic Hann window, no padding."""
    frames = frame_signal(w.samples, win_length, hop_length)
    window = hann_window(win_length)
    spec = np.fft.rfft(frames * window, axis=1)
    return Spectrogram(spec, win_length, hop_length, w.sample_rate)


def hz_to_mel(f_hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int,
    win_length: int,
    sample_rate: int,
    f_min: float = DEFAULT_F_MIN,
    f_max: float = DEFAULT_F_MAX,
) -> np.ndarray:
    """Triangular filters on the HTK mel scale, each row peak-normalized to 1."""
    if n_mels <= 0:
        raise ValueError("n_mels must be positive")
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ValueError("need 0 <= f_min < f_max <= Nyquist")
    n_bins = win_length // 2 + 1
    bin_hz = np.fft.rfftfreq(win_length, 1.0 / sample_rate)
    bin_mel = hz_to_mel(bin_hz)
    edges = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    bank = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_mel - lo) / (center - lo)
        falling = (hi - bin_mel) / (hi - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        peak = tri.max()
        if peak <= 0.0:
            raise ValueError(f"mel filter {m} captures no FFT bin; widen the band")
        bank[m] = tri / peak
    bank.setflags(write=False)
    return bank


@dataclass(frozen=True)
class MelSpectrogram:
    """Mel-filtered power frames, optionally log-compressed."""

    frames: np.ndarray
    n_mels: int
    win_length: int
    hop_length: int
    sample_rate: int
    log_compressed: bool


def mel_spectrogram(
    w: Waveform,
    n_mels: int = DEFAULT_N_MELS,
    win_length: int = DEFAULT_WIN_LENGTH,
    hop_length: int = DEFAULT_HOP_LENGTH,
    f_min: float = DEFAULT_F_MIN,
    f_max: float = DEFAULT_F_MAX,
    log: bool = True,
) -> MelSpectrogram:
    """Mel power spectrogram; log output floors the power at LOG_FLOOR."""
    spec = stft(w, win_length, hop_length)
    power = np.square(np.abs(spec.frames))
    bank = mel_filterbank(n_mels, win_length, w.sample_rate, f_min, f_max)
    mel = power @ bank.T
    if log:
        mel = np.log(np.maximum(mel, LOG_FLOOR))
    return MelSpectrogram(mel, n_mels, win_length, hop_length, w.sample_rate, log)


def _autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Linear autocorrelation of x for lags 0..max_lag via FFT."""
    n_fft = 1
    while n_fft < 2 * x.size:
        n_fft *= 2
    spectrum = np.fft.rfft(x, n_fft)
    acf = np.fft.irfft(spectrum * np.conj(spectrum), n_fft)
    return acf[: max_lag + 1]


def estimate_f0(
    w: Waveform,
    f_lo: float = F0_MIN_HZ,
    f_hi: float = F0_MAX_HZ,
) -> float | None:
    """Fundamental frequency by autocorrelation peak search, or None if unvoiced.

    Searches lags in [rate/f_hi, rate/f_lo] on the mean-centered signal. Only
    local maxima of the autocorrelation count as peaks (a maximum sitting on a
    range boundary is a rising edge, not a period); the smallest lag wins
    ties. Returns None when no peak reaches VOICING_THRESHOLD on the
    normalized autocorrelation.
    """
    return _estimate_f0_array(w.samples, w.sample_rate, f_lo, f_hi)


def _estimate_f0_array(
    x: np.ndarray, sample_rate: int, f_lo: float = F0_MIN_HZ, f_hi: float = F0_MAX_HZ
) -> float | None:
    if not 0.0 < f_lo < f_hi <= sample_rate / 2.0:
        raise ValueError("need 0 < f_lo < f_hi <= Nyquist")
    lag_min = int(np.ceil(sample_rate / f_hi))
    lag_max = int(np.floor(sample_rate / f_lo))
    if lag_max >= x.size:
        lag_max = x.size - 1
    if lag_min < 1 or lag_min > lag_max:
        return None
    centered = x - np.mean(x)
    lag_cap = min(lag_max + 1, x.size - 1)
    acf = _autocorrelation(centered, lag_cap)
    r0 = acf[0]
    if r0 <= 1e-12:
        return None
    lags = np.arange(lag_min, lag_max + 1)
    vals = acf[lags]
    left = acf[lags - 1]
    right = np.full(lags.size, -np.inf)
    has_right = lags + 1 <= lag_cap
    right[has_right] = acf[lags[has_right] + 1]
    peak_vals = np.where((vals >= left) & (vals >= right), vals, -np.inf)
    best = int(np.argmax(peak_vals))
    if not np.isfinite(peak_vals[best]) or vals[best] / r0 < VOICING_THRESHOLD:
        return None
    return sample_rate / float(lag_min + best)


def frame_energy(
    w: Waveform,
    win_length: int = DEFAULT_WIN_LENGTH,
    hop_length: int = DEFAULT_HOP_LENGTH,
) -> np.ndarray:
    """RMS of each Hann-windowed frame."""
    frames = frame_signal(w.samples, win_length, hop_length)
    window = hann_window(win_length)
    return np.sqrt(np.mean(np.square(frames * window), axis=1))


@dataclass(frozen=True)
class ProsodyStats:
    """Six-number prosody summary used by the emotion recognizer."""

    f0_mean_hz: float
    f0_std_hz: float
    f0_slope_hz_per_s: float
    energy_mean: float
    energy_std: float
    voiced_fraction: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.f0_mean_hz,
                self.f0_std_hz,
                self.f0_slope_hz_per_s,
                self.energy_mean,
                self.energy_std,
                self.voiced_fraction,
            ],
            dtype=np.float64,
        )

    FEATURE_NAMES = (
        "f0_mean_hz",
        "f0_std_hz",
        "f0_slope_hz_per_s",
        "energy_mean",
        "energy_std",
        "voiced_fraction",
    )


def prosody_stats(w: Waveform) -> ProsodyStats:
    """Aggregate per-frame F0 and energy into a ProsodyStats summary.

    F0 is tracked on 40 ms frames (hop 10 ms); a frame counts as voiced when
    estimate_f0 returns a value and the frame is not buried relative to the
    loudest frame (guards against periodic artifacts in near-silent tails).
    Estimates more than 25% away from the voiced median are harmonic or
    subharmonic slips, not pitch movement, and are dropped before the stats.
    An all-unvoiced input yields zero F0 fields and voiced_fraction 0.
    """
    x = w.samples
    if x.size < F0_FRAME_LENGTH:
        raise ValueError(f"waveform shorter than one F0 frame ({F0_FRAME_LENGTH} samples)")
    frames = frame_signal(x, F0_FRAME_LENGTH, F0_HOP_LENGTH)
    times = (np.arange(frames.shape[0]) * F0_HOP_LENGTH + F0_FRAME_LENGTH / 2) / w.sample_rate
    frame_rms = np.sqrt(np.mean(np.square(frames), axis=1))
    rms_gate = 0.02 * float(np.max(frame_rms))
    f0_values = []
    f0_times = []
    for i in range(frames.shape[0]):
        if frame_rms[i] < rms_gate:
            continue
        f0 = _estimate_f0_array(frames[i], w.sample_rate)
        if f0 is not None:
            f0_values.append(f0)
            f0_times.append(times[i])
    energies = frame_energy(w)
    energy_mean = float(np.mean(energies))
    energy_std = float(np.std(energies))
    if not f0_values:
        return ProsodyStats(0.0, 0.0, 0.0, energy_mean, energy_std, 0.0)
    f0_arr = np.asarray(f0_values)
    t_arr = np.asarray(f0_times)
    median = np.median(f0_arr)
    kept = np.abs(f0_arr - median) <= 0.25 * median
    f0_arr = f0_arr[kept]
    t_arr = t_arr[kept]
    if f0_arr.size >= 2 and np.ptp(t_arr) > 0.0:
        slope = float(np.polyfit(t_arr, f0_arr, 1)[0])
    else:
        slope = 0.0
    return ProsodyStats(
        f0_mean_hz=float(np.mean(f0_arr)),
        f0_std_hz=float(np.std(f0_arr)),
        f0_slope_hz_per_s=slope,
        energy_mean=energy_mean,
        energy_std=energy_std,
        voiced_fraction=f0_arr.size / frames.shape[0],
    )
