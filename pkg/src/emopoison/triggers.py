"""Backdoor trigger transforms.

The main trigger converts an utterance's prosody toward a target emotion
preset: time stretch to the target speaking rate, pitch shift to the target
F0 base, reshape the energy contour by the gain ratio and relative slope
difference, then resynthesize (pitch, loudness, and duration carry the
emotion; the resynthesis carries the converter's own timbre and, with a
fitted lexicon, a re-spoken word from its inventory, as voice-conversion
decoders do). The source emotion is inferred from the measured F0 (nearest
preset), so deviation from the source preset carries over to the target, and
converting toward the source's own preset is the identity.

Baseline triggers (patch noise, ultrasonic tone, noise clip, pitch boost)
follow the same transform interface. All triggers preserve duration, clamp to
[-1, 1], and are bit-deterministic for a fixed seed: stochastic triggers draw
from a generator keyed by the seed plus, for position-varying kinds, a hash
of the input samples.
"""

from __future__ import annotations

import dataclasses
import hashlib
import time as _time
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from emopoison.audio import Waveform, clamp_samples, pad_or_trim, read_wav, write_wav
from emopoison.corpus import SynthesisProfile, synth_utterance
from emopoison.emotions import DEFAULT_PRESETS, EmotionCategory, EmotionPreset, emotion_from_name
from emopoison.errors import ExternalConversionError
from emopoison.features import prosody_stats
from emopoison.vocoder import (
    PITCH_FACTOR_MAX,
    PITCH_FACTOR_MIN,
    local_rms,
    pitch_shift_array,
    replace_envelope_array,
    time_stretch_array,
)

AMPLITUDE_MAX = 0.5
_ACTIVE_THRESHOLD = 1e-4
_MIN_FRAME_GAIN = 0.05
_TIMBRE_KNEE_HZ = (300.0, 900.0)
_TIMBRE_ROLLOFF = (0.8, 1.6)
_TIMBRE_FLOOR = (0.002, 0.01)
_TIMBRE_BAND_HZ = (500.0, 3200.0)
_TIMBRE_BW_HZ = (200.0, 280.0)
_TIMBRE_MIN_RATIO = 1.3
_LEAK_MIX = 3.0
_LEAK_ENVELOPE_WIN = 512
_LEAK_GAIN_CAP = 4.0
_ACTIVE_ENV_FRACTION = 0.25


def _content_hash(samples: np.ndarray) -> int:
    digest = hashlib.sha256(samples.tobytes()).digest()
    return int.from_bytes(digest[:8], "little")


def _fake_formants(rng: np.random.Generator) -> tuple[tuple[float, float, float], ...]:
    """Draw a hallucinated word: segments of (fraction, center_hz, bandwidth_hz).

    A converter without a fitted lexicon cannot re-speak a known word, so its
    resynthesis paints in formants sampled from the generic shape family real
    words live in (two to four bands between 500 and 3200 Hz, neighbors at
    least a 1.3 ratio apart).
    """
    n_seg = int(rng.integers(2, 5))
    log_lo, log_hi = np.log(_TIMBRE_BAND_HZ[0]), np.log(_TIMBRE_BAND_HZ[1])
    centers = [float(np.exp(rng.uniform(log_lo, log_hi)))]
    while len(centers) < n_seg:
        nxt = float(np.exp(rng.uniform(log_lo, log_hi)))
        if abs(np.log(nxt / centers[-1])) < np.log(_TIMBRE_MIN_RATIO):
            continue
        centers.append(nxt)
    fracs = rng.uniform(0.7, 1.3, n_seg)
    bw = rng.uniform(*_TIMBRE_BW_HZ, n_seg)
    return tuple((float(fracs[i]), centers[i], float(bw[i])) for i in range(n_seg))


def _active_rms(x: np.ndarray) -> float:
    """RMS over the samples whose local envelope clears a quarter of the peak.

    Clip-level RMS confounds loudness with word length; the active-region
    RMS is the within-word level, which is what loudness contracts are
    about.
    """
    env = local_rms(x, _LEAK_ENVELOPE_WIN)
    peak = float(np.max(env))
    if peak <= 0.0:
        return 0.0
    active = env > _ACTIVE_ENV_FRACTION * peak
    return float(np.sqrt(np.mean(x[active] * x[active])))


def _leak_word(
    x: np.ndarray,
    rng: np.random.Generator,
    lexicon: SynthesisProfile,
    target: EmotionCategory,
    pitch_ratio: float,
) -> np.ndarray:
    """Re-speak a lexicon word at the target prosody over the smoothed source.

    A generative converter decodes toward its own training inventory; when
    the bottleneck drops the source's content, the decoder leaks whichever
    word it lands on. The word is pitch-aligned to the converted source (its
    comb and the residue's must coincide, or the pitch tracker reads the gap
    as movement), it dominates the mixture, and its temporal contour is
    imposed on the result. The within-word level is then matched to the
    converted source's (active region to active region, not clip to clip,
    since the leaked word need not fill the same extent the source did), so
    the conversion's F0, loudness, and rate targets all survive.
    """
    word_class = int(rng.integers(lexicon.n_classes))
    instance = int(rng.integers(2**31))
    template = lexicon.templates[word_class]
    own_ratio = sum(s.duration_fraction * s.f0_multiplier for s in template.segments)
    factor = pitch_ratio / own_ratio
    if factor != 1.0:
        preset = lexicon.presets[target]
        retuned = dataclasses.replace(
            preset,
            f0_base_hz=preset.f0_base_hz * factor,
            f0_slope_hz_per_s=preset.f0_slope_hz_per_s * factor,
        )
        presets = dict(lexicon.presets)
        presets[target] = retuned
        lexicon = dataclasses.replace(lexicon, presets=presets)
    spoken = synth_utterance(lexicon, word_class, target, instance)
    leak = np.asarray(spoken.waveform.samples, dtype=np.float64)
    if leak.size < x.size:
        leak = np.concatenate([leak, np.zeros(x.size - leak.size)])
    else:
        leak = leak[: x.size]
    rms_in = float(np.sqrt(np.mean(x * x)))
    leak_rms = float(np.sqrt(np.mean(leak * leak)))
    if rms_in <= 0.0 or leak_rms <= 0.0:
        return x
    active_in = _active_rms(x)
    mix = x + leak * (_LEAK_MIX * rms_in / leak_rms)
    gain = local_rms(leak, _LEAK_ENVELOPE_WIN) / np.maximum(
        local_rms(mix, _LEAK_ENVELOPE_WIN), 1e-12
    )
    mix = mix * np.minimum(gain, _LEAK_GAIN_CAP)
    active_out = _active_rms(mix)
    if active_out > 0.0 and active_in > 0.0:
        mix *= active_in / active_out
    return mix


def _nearest_preset(
    f0_hz: float, presets: Mapping[EmotionCategory, EmotionPreset]
) -> EmotionCategory:
    best = None
    best_dist = np.inf
    for emotion in sorted(presets, key=int):
        dist = abs(np.log(f0_hz / presets[emotion].f0_base_hz))
        if dist < best_dist:
            best = emotion
            best_dist = dist
    assert best is not None
    return best


def _reshape_energy(
    x: np.ndarray, sample_rate: int, gain_ratio: float, slope_delta: float
) -> np.ndarray:
    """Scale by the gain ratio with a linear ramp centered on the active region.

    The ramp slope is the difference of the relative F0 slopes (1/s). If the
    result would clip, the whole signal is renormalized to the pre-conversion
    peak; gains that stay in range are preserved so the mean energy actually
    moves by the gain ratio.
    """
    if gain_ratio == 1.0 and slope_delta == 0.0:
        return x
    active = np.flatnonzero(np.abs(x) > _ACTIVE_THRESHOLD)
    if active.size == 0:
        return x
    center = 0.5 * (active[0] + active[-1])
    t_centered = (np.arange(x.size) - center) / sample_rate
    gain = gain_ratio * np.maximum(1.0 + slope_delta * t_centered, _MIN_FRAME_GAIN)
    pre_peak = np.max(np.abs(x))
    out = x * gain
    post_peak = np.max(np.abs(out))
    if post_peak > 0.999 and pre_peak > 0.0:
        out *= pre_peak / post_peak
    return out


def prosody_convert(
    w: Waveform,
    target: EmotionCategory,
    presets: Mapping[EmotionCategory, EmotionPreset] | None = None,
    seed: int = 0,
    lexicon: SynthesisProfile | None = None,
) -> Waveform:
    """Convert the prosody of w toward the target emotion preset.

    Unvoiced input is returned unchanged. Pipeline order: time stretch,
    pitch shift, energy reshape, then envelope resynthesis; each factor is
    preset-to-preset, so converting toward the inferred source preset leaves
    every stage neutral and the input passes through untouched.

    The resynthesis stage models what a compact voice converter does to
    content: the bottleneck smooths the source's resonances down to a flat
    noise bed, and the decoder leaks a word of its own on top. With a fitted
    lexicon the leak is a fully re-spoken inventory word at the target
    prosody, and its temporal contour owns the result; without one the
    converter paints hallucinated formants into the bed instead. All draws
    come from the seed plus a content hash: deterministic for a fixed seed,
    varied across inputs.
    """
    table = DEFAULT_PRESETS if presets is None else presets
    if target not in table:
        raise ValueError(f"target emotion {target} missing from preset table")
    stats = prosody_stats(w)
    if stats.voiced_fraction == 0.0 or stats.f0_mean_hz <= 0.0:
        return w
    source = _nearest_preset(stats.f0_mean_hz, table)
    src, tgt = table[source], table[target]

    stretch_ratio = tgt.rate_factor / src.rate_factor
    pitch_factor = tgt.f0_base_hz / src.f0_base_hz
    pitch_factor = min(max(pitch_factor, PITCH_FACTOR_MIN), PITCH_FACTOR_MAX)
    gain_ratio = tgt.energy_gain / src.energy_gain
    slope_delta = tgt.relative_f0_slope - src.relative_f0_slope
    engaged = (
        stretch_ratio != 1.0
        or pitch_factor != 1.0
        or gain_ratio != 1.0
        or slope_delta != 0.0
    )

    x = np.asarray(w.samples, dtype=np.float64)
    if stretch_ratio != 1.0:
        x = time_stretch_array(x, stretch_ratio)
    if pitch_factor != 1.0:
        x = pitch_shift_array(x, pitch_factor)
    x = _reshape_energy(x, w.sample_rate, gain_ratio, slope_delta)
    if engaged:
        rng = np.random.default_rng([seed, _content_hash(w.samples)])
        knee_hz = float(rng.uniform(*_TIMBRE_KNEE_HZ))
        rolloff = float(rng.uniform(*_TIMBRE_ROLLOFF))
        floor = float(rng.uniform(*_TIMBRE_FLOOR))
        if lexicon is None:
            formants = _fake_formants(rng)
            x = replace_envelope_array(x, w.sample_rate, knee_hz, rolloff, formants, floor)
        else:
            if lexicon.sample_rate != w.sample_rate:
                raise ValueError(
                    f"lexicon sample rate {lexicon.sample_rate} does not match "
                    f"waveform rate {w.sample_rate}"
                )
            x = replace_envelope_array(x, w.sample_rate, knee_hz, rolloff, (), floor)
            dev = stats.f0_mean_hz / src.f0_base_hz
            x = _leak_word(x, rng, lexicon, target, dev)
    return Waveform(clamp_samples(x), w.sample_rate)


class BaseTrigger(TransformerMixin, BaseEstimator):
    """Stateless waveform transform with a serializable parameter set."""

    kind: str = ""

    def fit(self, X=None, y=None):  # noqa: N803 (sklearn signature)
        self.validate_params()
        return self

    def validate_params(self) -> None:
        pass

    def apply(self, w: Waveform) -> Waveform:
        """Transform one waveform, preserving duration and the [-1, 1] range."""
        self.validate_params()
        out = self._apply(w)
        return pad_or_trim(out, w.duration_s)

    def transform(self, X: np.ndarray, sample_rate: int = 16000) -> np.ndarray:
        """Row-wise apply for (n, length) arrays of samples."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return self.apply(Waveform(X, sample_rate)).samples.copy()
        return np.stack([self.apply(Waveform(row, sample_rate)).samples for row in X])

    def _apply(self, w: Waveform) -> Waveform:
        raise NotImplementedError


class ProsodyConversionTrigger(BaseTrigger):
    """Emotion-conversion trigger; the poisoned samples carry the target prosody.

    lexicon_seed and lexicon_size name the word inventory the converter was
    fitted on (the corpus profile's seed and class count); its resynthesis
    stage then leaks re-spoken words from that inventory. Left unset, it
    falls back to hallucinated formants from the generic word-shape family.
    """

    kind = "prosody"

    def __init__(
        self,
        target_emotion: EmotionCategory = EmotionCategory.ANGRY,
        presets: Mapping[EmotionCategory, EmotionPreset] | None = None,
        seed: int = 0,
        lexicon_seed: int | None = None,
        lexicon_size: int = 0,
    ):
        self.target_emotion = target_emotion
        self.presets = presets
        self.seed = seed
        self.lexicon_seed = lexicon_seed
        self.lexicon_size = lexicon_size

    def validate_params(self) -> None:
        table = DEFAULT_PRESETS if self.presets is None else self.presets
        for emotion, preset in table.items():
            if preset.f0_base_hz <= 0 or preset.energy_gain <= 0 or preset.rate_factor <= 0:
                raise ValueError(f"preset for {emotion} must have positive factors")
        if self.target_emotion not in table:
            raise ValueError(f"no preset for target emotion {self.target_emotion}")
        if (self.lexicon_seed is None) != (self.lexicon_size == 0):
            raise ValueError("lexicon_seed and lexicon_size must be set together")
        if self.lexicon_size < 0:
            raise ValueError("lexicon_size must be non-negative")

    def lexicon(self) -> SynthesisProfile | None:
        if self.lexicon_seed is None:
            return None
        return SynthesisProfile.default(self.lexicon_size, self.lexicon_seed)

    def _apply(self, w: Waveform) -> Waveform:
        return prosody_convert(
            w, self.target_emotion, self.presets, seed=self.seed, lexicon=self.lexicon()
        )


class PatchNoiseTrigger(BaseTrigger):
    """Fixed seeded noise patch over a leading window."""

    kind = "patch_noise"

    def __init__(self, amplitude: float = 0.1, length: int = 800, position: int = 0, seed: int = 0):
        self.amplitude = amplitude
        self.length = length
        self.position = position
        self.seed = seed

    def validate_params(self) -> None:
        if not 0.0 < self.amplitude <= AMPLITUDE_MAX:
            raise ValueError(f"amplitude must lie in (0, {AMPLITUDE_MAX}]")
        if self.length <= 0 or self.position < 0:
            raise ValueError("length must be positive and position non-negative")

    def _apply(self, w: Waveform) -> Waveform:
        rng = np.random.default_rng([self.seed, 7])
        noise = rng.uniform(-self.amplitude, self.amplitude, self.length)
        x = w.samples.copy()
        end = min(self.position + self.length, x.size)
        span = end - self.position
        if span <= 0:
            raise ValueError("patch position beyond the end of the waveform")
        x[self.position : end] += noise[:span]
        return Waveform(clamp_samples(x), w.sample_rate)


class UltrasonicToneTrigger(BaseTrigger):
    """Near-Nyquist tone mixed over the whole clip."""

    kind = "ultrasonic"

    def __init__(self, amplitude: float = 0.05, frequency_hz: float = 7800.0, seed: int = 0):
        self.amplitude = amplitude
        self.frequency_hz = frequency_hz
        self.seed = seed

    def validate_params(self) -> None:
        if not 0.0 < self.amplitude <= AMPLITUDE_MAX:
            raise ValueError(f"amplitude must lie in (0, {AMPLITUDE_MAX}]")

    def _apply(self, w: Waveform) -> Waveform:
        if not 6000.0 < self.frequency_hz < w.sample_rate / 2.0:
            raise ValueError(
                f"tone frequency {self.frequency_hz} outside (6000, {w.sample_rate / 2})"
            )
        t = np.arange(w.samples.size) / w.sample_rate
        tone = self.amplitude * np.sin(2.0 * np.pi * self.frequency_hz * t)
        return Waveform(clamp_samples(w.samples + tone), w.sample_rate)


class NoiseClipTrigger(BaseTrigger):
    """100 ms noise burst at a position drawn per input (position-independent trigger)."""

    kind = "noise_clip"

    def __init__(self, amplitude: float = 0.1, duration_s: float = 0.1, seed: int = 0):
        self.amplitude = amplitude
        self.duration_s = duration_s
        self.seed = seed

    def validate_params(self) -> None:
        if not 0.0 < self.amplitude <= AMPLITUDE_MAX:
            raise ValueError(f"amplitude must lie in (0, {AMPLITUDE_MAX}]")
        if self.duration_s <= 0.0:
            raise ValueError("duration_s must be positive")

    def _apply(self, w: Waveform) -> Waveform:
        burst_len = int(round(self.duration_s * w.sample_rate))
        if burst_len >= w.samples.size:
            raise ValueError("burst longer than the waveform")
        rng = np.random.default_rng([self.seed, _content_hash(w.samples)])
        start = int(rng.integers(0, w.samples.size - burst_len + 1))
        burst = rng.uniform(-self.amplitude, self.amplitude, burst_len)
        x = w.samples.copy()
        x[start : start + burst_len] += burst
        return Waveform(clamp_samples(x), w.sample_rate)


class PitchBoostTrigger(BaseTrigger):
    """Fixed pitch boost plus a quiet masking tone."""

    kind = "pitch_boost"

    BOOST_FACTOR = 1.3
    TONE_DB = -20.0
    TONE_HZ = 450.0

    def __init__(self, seed: int = 0):
        self.seed = seed

    def _apply(self, w: Waveform) -> Waveform:
        shifted = pitch_shift_array(w.samples, self.BOOST_FACTOR)
        shifted = shifted[: w.samples.size]
        if shifted.size < w.samples.size:
            shifted = np.concatenate([shifted, np.zeros(w.samples.size - shifted.size)])
        t = np.arange(shifted.size) / w.sample_rate
        tone = 10.0 ** (self.TONE_DB / 20.0) * np.sin(2.0 * np.pi * self.TONE_HZ * t)
        return Waveform(clamp_samples(shifted + tone), w.sample_rate)


TRIGGER_KINDS: dict[str, type[BaseTrigger]] = {
    cls.kind: cls
    for cls in (
        ProsodyConversionTrigger,
        PatchNoiseTrigger,
        UltrasonicToneTrigger,
        NoiseClipTrigger,
        PitchBoostTrigger,
    )
}


def trigger_to_dict(trigger: BaseTrigger) -> dict:
    params = {}
    for name, value in trigger.get_params(deep=False).items():
        if isinstance(value, EmotionCategory):
            value = value.label
        elif name == "presets" and value is not None:
            value = {
                emotion.label: vars(preset).copy() for emotion, preset in sorted(value.items())
            }
        params[name] = value
    return {"kind": trigger.kind, **params}


def trigger_from_dict(data: Mapping) -> BaseTrigger:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in TRIGGER_KINDS:
        raise ValueError(f"unknown trigger kind {kind!r}; expected one of {sorted(TRIGGER_KINDS)}")
    if "target_emotion" in data and isinstance(data["target_emotion"], str):
        data["target_emotion"] = emotion_from_name(data["target_emotion"])
    if data.get("presets") is not None:
        data["presets"] = {
            emotion_from_name(name): EmotionPreset(**fields)
            for name, fields in data["presets"].items()
        }
    trigger = TRIGGER_KINDS[kind](**data)
    trigger.validate_params()
    return trigger


class ExternalConversionExchange:
    """Directory protocol for plugging in an external voice converter.

    For every utterance the pipeline writes <id>.src.wav and a one-line
    <id>.target file naming the target emotion; the external tool is expected
    to answer with <id>.conv.wav. Missing conversions are a hard error, never
    a silent fallback to the internal transform.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def export(self, items: Iterable[tuple[str, Waveform]], target: EmotionCategory) -> list[str]:
        self.directory.mkdir(parents=True, exist_ok=True)
        ids = []
        for uid, waveform in items:
            write_wav(waveform, self.directory / f"{uid}.src.wav")
            (self.directory / f"{uid}.target").write_text(target.label + "\n", encoding="utf-8")
            ids.append(uid)
        return ids

    def collect(self, ids: Sequence[str], timeout_s: float = 0.0, poll_s: float = 0.05) -> dict[str, Waveform]:
        deadline = _time.monotonic() + timeout_s
        while True:
            missing = [uid for uid in ids if not (self.directory / f"{uid}.conv.wav").exists()]
            if not missing:
                break
            if _time.monotonic() >= deadline:
                raise ExternalConversionError(
                    f"external converter never produced {len(missing)} file(s): "
                    + ", ".join(f"{uid}.conv.wav" for uid in sorted(missing)[:10])
                )
            _time.sleep(poll_s)
        return {uid: read_wav(self.directory / f"{uid}.conv.wav") for uid in ids}
