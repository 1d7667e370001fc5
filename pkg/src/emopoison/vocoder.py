"""Phase-vocoder time stretching and resampling-based pitch shifting.

Classic single-channel phase vocoder: 1024-point FFT, analysis hop 256,
per-bin phase accumulation (no phase locking), weighted overlap-add with a
squared periodic Hann window. Pitch shifting stretches time by the factor and
then resamples back, so the pitch scales exactly while the duration lands
within one hop of the input.

Without phase locking the overlap-add is partly incoherent, which attenuates
some stretches of the signal more than others and smears energy past the ends
of the content. Both outputs are therefore envelope-matched: the local RMS
envelope of the input, mapped onto the output time grid, is imposed on the
output.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from emopoison.audio import Waveform, clamp_samples
from emopoison.features import hann_window

VOCODER_N_FFT = 1024
VOCODER_HOP = 256
PITCH_FACTOR_MIN = 0.5
PITCH_FACTOR_MAX = 2.0
_ENVELOPE_WIN = 512
_ENVELOPE_GAIN_CAP = 4.0


def _stft_frames(x: np.ndarray, window: np.ndarray, hop: int) -> np.ndarray:
    n_fft = window.size
    n_frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * window[None, :], axis=1)


def time_stretch_array(x: np.ndarray, ratio: float) -> np.ndarray:
    """Stretch x to round(len * ratio) samples without changing pitch."""
    if ratio <= 0.0:
        raise ValueError("stretch ratio must be positive")
    if ratio == 1.0:
        return x.copy()
    n_fft = VOCODER_N_FFT
    hop_a = VOCODER_HOP
    if x.size < n_fft + hop_a:
        raise ValueError(f"input too short to stretch ({x.size} samples, need {n_fft + hop_a})")
    hop_s = max(1, int(round(hop_a * ratio)))
    window = hann_window(n_fft)
    spectra = _stft_frames(x, window, hop_a)
    n_frames, n_bins = spectra.shape

    omega = 2.0 * np.pi * np.arange(n_bins) / n_fft
    magnitudes = np.abs(spectra)
    phases = np.angle(spectra)
    out_len = (n_frames - 1) * hop_s + n_fft
    out = np.zeros(out_len)
    weight = np.zeros(out_len)

    synth_phase = phases[0].copy()
    for i in range(n_frames):
        if i == 0:
            frame_phase = phases[0]
        else:
            delta = phases[i] - phases[i - 1] - omega * hop_a
            delta -= 2.0 * np.pi * np.round(delta / (2.0 * np.pi))
            inst_freq = omega + delta / hop_a
            synth_phase = synth_phase + inst_freq * hop_s
            frame_phase = synth_phase
        frame = np.fft.irfft(magnitudes[i] * np.exp(1j * frame_phase), n_fft)
        start = i * hop_s
        out[start : start + n_fft] += frame * window
        weight[start : start + n_fft] += window * window

    nonzero = weight > 1e-9
    out[nonzero] /= weight[nonzero]

    target = int(round(x.size * ratio))
    if out.size >= target:
        out = out[:target]
    else:
        out = np.concatenate([out, np.zeros(target - out.size)])
    return _match_envelope(x, out)


def local_rms(x: np.ndarray, win: int) -> np.ndarray:
    """Centered moving RMS; windows are clipped at the signal edges."""
    half = win // 2
    cumulative = np.concatenate([np.zeros(1), np.cumsum(np.square(x))])
    starts = np.clip(np.arange(x.size) - half, 0, x.size)
    ends = np.clip(np.arange(x.size) + half + 1, 0, x.size)
    return np.sqrt((cumulative[ends] - cumulative[starts]) / np.maximum(ends - starts, 1))


def _match_envelope(reference: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Impose the reference's local RMS envelope, mapped onto the output grid."""
    env_ref = local_rms(reference, _ENVELOPE_WIN)
    env_out = local_rms(out, _ENVELOPE_WIN)
    positions = np.linspace(0.0, reference.size - 1, out.size)
    mapped = np.interp(positions, np.arange(reference.size), env_ref)
    gain = mapped / np.maximum(env_out, 1e-8)
    np.minimum(gain, _ENVELOPE_GAIN_CAP, out=gain)
    return out * gain


_CEPSTRAL_CUTOFF = 48


def replace_envelope_array(
    x: np.ndarray,
    sample_rate: int,
    knee_hz: float,
    rolloff: float,
    formants: Sequence[tuple[float, float, float]] = (),
    floor: float = 0.005,
    keep_excitation: bool = True,
    phase_seed: int | None = None,
) -> np.ndarray:
    """Swap every frame's spectral envelope for a synthetic one.

    The log magnitude of each STFT frame is split by cepstral liftering into
    a smooth envelope and the excitation riding on it; the envelope is
    discarded and the excitation is placed on a synthetic envelope instead:
    a Gaussian formant weight over a quiet (1 + f/knee_hz)^-rolloff noise
    bed. Per-frame energy passes through unchanged. With keep_excitation
    the harmonic comb and phases survive too, so pitch rides along while
    the resonance pattern that identified the word is overwritten; without
    it the magnitudes collapse to the bare synthetic shape, the way a
    bottleneck that regenerates excitation leaves nothing of the source but
    its energy, and phase_seed (if given) replaces the phases with seeded
    uniform draws so no periodicity survives either.

    formants: segments of (duration_fraction, center_hz, bandwidth_hz),
    each owning its share of the frames; fractions are normalized. An empty
    sequence leaves the bare noise bed, the house timbre of a converter
    with nothing to say.
    """
    if knee_hz <= 0.0 or rolloff < 0.0:
        raise ValueError("knee_hz must be positive and rolloff non-negative")
    if floor <= 0.0:
        raise ValueError("floor must be positive")
    n_fft = VOCODER_N_FFT
    hop = VOCODER_HOP
    if x.size < n_fft + hop:
        raise ValueError(f"input too short to resynthesize ({x.size} samples, need {n_fft + hop})")
    window = hann_window(n_fft)
    spectra = _stft_frames(x, window, hop)
    n_frames = spectra.shape[0]
    mag = np.abs(spectra)
    phasors = np.where(mag > 1e-300, spectra / np.maximum(mag, 1e-300), 1.0)

    log_mag = np.log(np.maximum(mag, 1e-10))
    cepstrum = np.fft.irfft(log_mag, n_fft, axis=1)
    lifter = np.zeros(n_fft)
    lifter[: _CEPSTRAL_CUTOFF + 1] = 1.0
    lifter[-_CEPSTRAL_CUTOFF:] = 1.0
    envelope = np.fft.rfft(cepstrum * lifter[None, :], n_fft, axis=1).real

    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    bed = floor * np.power(1.0 + freqs / knee_hz, -rolloff)
    shape = np.tile(np.log(bed), (n_frames, 1))
    if formants:
        fractions = np.array([max(float(seg[0]), 0.0) for seg in formants])
        if fractions.sum() <= 0.0:
            raise ValueError("formant segment fractions must not all be zero")
        boundaries = np.round(np.cumsum(fractions) / fractions.sum() * n_frames).astype(int)
        start = 0
        for (_, center_hz, bw_hz), end in zip(formants, boundaries):
            if bw_hz <= 0.0:
                raise ValueError("formant bandwidth must be positive")
            z = (freqs - center_hz) / bw_hz
            shape[start:end] = np.log(np.exp(-0.5 * z * z) + bed)
            start = end

    if keep_excitation:
        new_mag = np.exp(log_mag - envelope + shape)
    else:
        new_mag = np.exp(shape)
        if phase_seed is not None:
            rng = np.random.default_rng(phase_seed)
            angles = rng.uniform(0.0, 2.0 * np.pi, phasors.shape)
            angles[:, 0] = 0.0
            angles[:, -1] = 0.0
            phasors = np.exp(1j * angles)
    energy_in = np.sqrt(np.sum(mag * mag, axis=1))
    energy_out = np.sqrt(np.sum(new_mag * new_mag, axis=1))
    new_mag *= (energy_in / np.maximum(energy_out, 1e-300))[:, None]

    frames = np.fft.irfft(new_mag * phasors, n_fft, axis=1)
    out = np.zeros((n_frames - 1) * hop + n_fft)
    weight = np.zeros_like(out)
    for i in range(n_frames):
        start = i * hop
        out[start : start + n_fft] += frames[i] * window
        weight[start : start + n_fft] += window * window
    nonzero = weight > 1e-9
    out[nonzero] /= weight[nonzero]

    if out.size >= x.size:
        out = out[: x.size]
    else:
        out = np.concatenate([out, np.zeros(x.size - out.size)])
    return _match_envelope(x, out)


def resample_array(x: np.ndarray, factor: float) -> np.ndarray:
    """Linear-interpolation playback-rate change; factor > 1 shortens and raises pitch."""
    if factor <= 0.0:
        raise ValueError("resample factor must be positive")
    if factor == 1.0:
        return x.copy()
    out_len = int(np.floor((x.size - 1) / factor)) + 1
    positions = np.arange(out_len) * factor
    return np.interp(positions, np.arange(x.size), x)


def pitch_shift_array(x: np.ndarray, factor: float) -> np.ndarray:
    """Stretch by the factor then resample back; envelope-matched to the input."""
    if not PITCH_FACTOR_MIN <= factor <= PITCH_FACTOR_MAX:
        raise ValueError(
            f"pitch factor {factor} outside [{PITCH_FACTOR_MIN}, {PITCH_FACTOR_MAX}]"
        )
    if factor == 1.0:
        return x.copy()
    shifted = resample_array(time_stretch_array(x, factor), factor)
    return _match_envelope(x, shifted)


def time_stretch(w: Waveform, ratio: float) -> Waveform:
    return Waveform(clamp_samples(time_stretch_array(w.samples, ratio)), w.sample_rate)


def pitch_shift(w: Waveform, factor: float) -> Waveform:
    """Scale the fundamental by factor in [0.5, 2.0], duration within one hop."""
    if factor == 1.0:
        return w
    return Waveform(clamp_samples(pitch_shift_array(w.samples, factor)), w.sample_rate)
