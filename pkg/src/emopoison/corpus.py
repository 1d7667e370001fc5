"""Synthetic keyword corpus generation and manifest I/O.

Each class is a fixed word template: a short sequence of harmonic segments,
each with its own formant band. Emotion enters only through the prosody
preset (F0 level and slope, energy gain, speaking rate), so class identity
and emotion are independent factors. Utterances are synthesized at a class
rate, quantized onto the int16 grid, and padded to the 1 s clip length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from emopoison.audio import (
    CLIP_DURATION_S,
    DEFAULT_SAMPLE_RATE,
    Waveform,
    clamp_samples,
    pad_or_trim,
    quantize,
    read_wav,
    write_wav,
)
from emopoison.emotions import DEFAULT_PRESETS, EmotionCategory, EmotionPreset, emotion_from_name
from emopoison.errors import AudioFormatError

# Neutral-dominant, and the conventional conversion target (angry) is absent:
# read-speech corpora contain almost no hot anger, and a natively angry
# utterance is a fixed point of the angry-conversion trigger, so it could
# never carry the trigger signature anyway.
DEFAULT_EMOTION_MIX: Mapping[EmotionCategory, float] = {
    EmotionCategory.NEUTRAL: 0.6,
    EmotionCategory.SAD: 0.15,
    EmotionCategory.SURPRISE: 0.15,
    EmotionCategory.HAPPY: 0.1,
}

_HARMONIC_CAP_HZ = 5500.0
_MAX_HARMONICS = 32
_HARMONIC_BASE = 0.12
_FORMANT_GAIN = 1.0
_FORMANT_BW_HZ = 240.0
_EDGE_RAMP_S = 0.02
_SEGMENT_BLEND_S = 0.012
_BASE_RMS = 0.055
_JITTER_POINT_SPACING_S = 0.05


@dataclass(frozen=True)
class WordSegment:
    f0_multiplier: float
    formant_hz: float
    duration_fraction: float


@dataclass(frozen=True)
class WordTemplate:
    segments: tuple[WordSegment, ...]
    base_duration_s: float

    def __post_init__(self) -> None:
        if not 2 <= len(self.segments) <= 4:
            raise ValueError("word templates use 2 to 4 segments")
        total = sum(s.duration_fraction for s in self.segments)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("segment duration fractions must sum to 1")
        if self.base_duration_s <= 0.0:
            raise ValueError("base_duration_s must be positive")


@dataclass(frozen=True)
class SynthesisProfile:
    """Everything needed to regenerate a corpus deterministically."""

    templates: tuple[WordTemplate, ...]
    presets: Mapping[EmotionCategory, EmotionPreset]
    noise_floor: float
    seed: int
    sample_rate: int = DEFAULT_SAMPLE_RATE
    clip_duration_s: float = CLIP_DURATION_S
    slope_jitter_hz_per_s: float = 40.0

    def __post_init__(self) -> None:
        if not self.templates:
            raise ValueError("profile needs at least one word template")
        seen = set()
        for tpl in self.templates:
            key = tuple(
                (round(s.f0_multiplier, 9), round(s.formant_hz, 6), round(s.duration_fraction, 9))
                for s in tpl.segments
            )
            if key in seen:
                raise ValueError("word templates must be pairwise distinct")
            seen.add(key)
        if self.noise_floor < 0.0:
            raise ValueError("noise_floor must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.templates)

    @classmethod
    def default(
        cls,
        n_classes: int,
        seed: int,
        noise_floor: float = 5e-4,
        sample_rate: int = DEFAULT_SAMPLE_RATE,
    ) -> "SynthesisProfile":
        """Generate n_classes distinct word templates from the seed."""
        if n_classes < 1:
            raise ValueError("n_classes must be at least 1")
        rng = np.random.default_rng([seed, 15485863])
        templates: list[WordTemplate] = []
        seen: set[tuple] = set()
        while len(templates) < n_classes:
            n_seg = int(rng.integers(2, 5))
            log_lo, log_hi = np.log(500.0), np.log(3200.0)
            centers = [float(np.exp(rng.uniform(log_lo, log_hi)))]
            while len(centers) < n_seg:
                nxt = float(np.exp(rng.uniform(log_lo, log_hi)))
                if abs(np.log(nxt / centers[-1])) < np.log(1.3):
                    continue
                centers.append(nxt)
            raw = rng.uniform(0.7, 1.3, n_seg)
            fracs = raw / raw.sum()
            mults = rng.uniform(0.98, 1.02, n_seg)
            segments = tuple(
                WordSegment(float(mults[i]), centers[i], float(fracs[i])) for i in range(n_seg)
            )
            tpl = WordTemplate(segments, base_duration_s=float(rng.uniform(0.45, 0.6)))
            key = tuple((s.formant_hz, round(s.duration_fraction, 6)) for s in tpl.segments)
            if key in seen:
                continue
            seen.add(key)
            templates.append(tpl)
        return cls(tuple(templates), DEFAULT_PRESETS, noise_floor, seed, sample_rate)


@dataclass(frozen=True)
class Utterance:
    id: str
    waveform: Waveform
    class_label: int
    emotion_label: EmotionCategory
    source: Literal["synthetic", "file", "poison"] = "synthetic"


def _piecewise_blend(values: Sequence[float], boundaries: Sequence[int], n: int, blend: int) -> np.ndarray:
    """Step function over segments with short linear cross-fades at boundaries."""
    out = np.empty(n, dtype=np.float64)
    start = 0
    for value, end in zip(values, boundaries):
        out[start:end] = value
        start = end
    for k in range(1, len(boundaries)):
        b = boundaries[k - 1]
        half = min(blend // 2, b, n - b)
        if half <= 0:
            continue
        ramp = np.linspace(values[k - 1], values[k], 2 * half)
        out[b - half : b + half] = ramp
    return out


def synth_utterance(
    profile: SynthesisProfile,
    class_id: int,
    emotion: EmotionCategory,
    instance_seed: int,
) -> Utterance:
    """Render one keyword utterance; deterministic in (profile.seed, class, emotion, instance)."""
    if not 0 <= class_id < profile.n_classes:
        raise ValueError(f"class_id {class_id} out of range for {profile.n_classes} classes")
    preset = profile.presets[emotion]
    template = profile.templates[class_id]
    sr = profile.sample_rate
    rng = np.random.default_rng([profile.seed, class_id, int(emotion), instance_seed])

    duration = template.base_duration_s * preset.rate_factor
    n = int(round(duration * sr))
    t = np.arange(n) / sr

    n_jitter = max(2, int(np.ceil(duration / _JITTER_POINT_SPACING_S)) + 1)
    jitter_points = rng.uniform(-1.0, 1.0, n_jitter)
    jitter_t = np.linspace(0.0, duration, n_jitter)
    jitter = np.interp(t, jitter_t, jitter_points)
    slope_extra = float(rng.uniform(-profile.slope_jitter_hz_per_s, profile.slope_jitter_hz_per_s))

    fracs = np.array([s.duration_fraction for s in template.segments])
    boundaries = np.round(np.cumsum(fracs) * n).astype(int)
    boundaries[-1] = n
    blend = int(round(_SEGMENT_BLEND_S * sr))
    mult = _piecewise_blend([s.f0_multiplier for s in template.segments], boundaries, n, blend)
    formant = _piecewise_blend([s.formant_hz for s in template.segments], boundaries, n, blend)

    slope = preset.f0_slope_hz_per_s + slope_extra
    f0 = (preset.f0_base_hz + slope * (t - duration / 2.0)) * mult * (1.0 + preset.f0_jitter * jitter)
    f0 = np.maximum(f0, 1.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    max_f0 = float(np.max(f0))
    n_harm = min(_MAX_HARMONICS, max(3, int(_HARMONIC_CAP_HZ / max_f0)))
    k = np.arange(1, n_harm + 1, dtype=np.float64)
    harm_f = np.outer(f0, k)
    amps = _HARMONIC_BASE / k[None, :] + _FORMANT_GAIN * np.exp(
        -0.5 * np.square((harm_f - formant[:, None]) / _FORMANT_BW_HZ)
    )
    amps[harm_f > _HARMONIC_CAP_HZ] = 0.0
    x = np.sum(amps * np.sin(np.outer(phase, k)), axis=1)

    ramp_n = min(int(_EDGE_RAMP_S * sr), n // 2)
    envelope = np.ones(n)
    if ramp_n > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_n) / ramp_n)
        envelope[:ramp_n] = edge
        envelope[-ramp_n:] = edge[::-1]
    x *= envelope

    # Emotional speech tilts loudness along with pitch; give the energy
    # contour the preset's relative F0 slope so the cue is present in
    # natural audio exactly as conversion reshaping produces it.
    tilt = 1.0 + preset.relative_f0_slope * (t - duration / 2.0)
    x *= np.maximum(tilt, 0.1)

    rms = np.sqrt(np.mean(np.square(x)))
    if rms > 0.0:
        x *= (_BASE_RMS * preset.energy_gain) / rms
    x += profile.noise_floor * rng.standard_normal(n)

    w = Waveform(clamp_samples(x), sr)
    w = pad_or_trim(quantize(w), profile.clip_duration_s)
    uid = f"c{class_id:02d}-{emotion.label}-i{instance_seed:04d}"
    return Utterance(uid, w, class_id, emotion, "synthetic")


def allocate_emotion_counts(
    mix: Mapping[EmotionCategory, float], total: int
) -> dict[EmotionCategory, int]:
    """Largest-remainder apportionment of total slots across the mix."""
    if not mix:
        raise ValueError("emotion mix must not be empty")
    items = sorted(mix.items(), key=lambda kv: int(kv[0]))
    fractions = np.array([f for _, f in items], dtype=np.float64)
    if np.any(fractions < 0.0):
        raise ValueError("emotion mix fractions must be non-negative")
    if abs(float(fractions.sum()) - 1.0) > 1e-9:
        raise ValueError(f"emotion mix fractions sum to {fractions.sum():.12g}, expected 1.0")
    exact = fractions * total
    counts = np.floor(exact).astype(int)
    remainder = total - int(counts.sum())
    order = np.argsort(-(exact - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1
    return {emotion: int(c) for (emotion, _), c in zip(items, counts)}


def synth_corpus(
    profile: SynthesisProfile,
    per_class: int,
    emotion_mix: Mapping[EmotionCategory, float] | None = None,
) -> list[Utterance]:
    """Synthesize per_class utterances for every template class.

    Emotion counts follow the mix to within one utterance; the emotion
    assignment and the returned order are both shuffles seeded by the
    profile seed.
    """
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    mix = DEFAULT_EMOTION_MIX if emotion_mix is None else emotion_mix
    total = profile.n_classes * per_class
    counts = allocate_emotion_counts(mix, total)
    emotions: list[EmotionCategory] = []
    for emotion in sorted(counts, key=int):
        emotions.extend([emotion] * counts[emotion])
    rng = np.random.default_rng([profile.seed, 32452843])
    assignment = [emotions[i] for i in rng.permutation(total)]
    utterances = []
    slot = 0
    for class_id in range(profile.n_classes):
        for instance in range(per_class):
            utterances.append(synth_utterance(profile, class_id, assignment[slot], instance))
            slot += 1
    order = np.random.default_rng([profile.seed, 49979687]).permutation(total)
    return [utterances[i] for i in order]


def manifest_entry(u: Utterance, path: str, poison: bool = False) -> dict:
    entry = {
        "id": u.id,
        "path": path,
        "class_label": u.class_label,
        "emotion_label": u.emotion_label.label,
        "source": u.source,
    }
    if poison:
        entry["poison"] = True
    return entry


def save_corpus(
    utterances: Iterable[Utterance],
    directory: str | Path,
    manifest_name: str = "manifest.jsonl",
    audio_subdir: str = "audio",
    poison_ids: frozenset[str] | set[str] = frozenset(),
) -> Path:
    """Write WAVs plus a JSON-lines manifest; returns the manifest path."""
    directory = Path(directory)
    audio_dir = directory / audio_subdir
    audio_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        rel = f"{audio_subdir}/{u.id}.wav"
        write_wav(u.waveform, directory / rel)
        lines.append(json.dumps(manifest_entry(u, rel, u.id in poison_ids), sort_keys=True))
    manifest_path = directory / manifest_name
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def write_manifest(
    entries: Iterable[dict],
    manifest_path: str | Path,
) -> None:
    lines = [json.dumps(entry, sort_keys=True) for entry in entries]
    Path(manifest_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(manifest_path: str | Path) -> list[dict]:
    """Parse a JSON-lines manifest, enforcing unique ids and required keys."""
    manifest_path = Path(manifest_path)
    entries = []
    seen: set[str] = set()
    required = {"id", "path", "class_label", "emotion_label", "source"}
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AudioFormatError(f"{manifest_path}:{lineno}: invalid JSON: {exc}") from exc
        missing = required - entry.keys()
        if missing:
            raise AudioFormatError(f"{manifest_path}:{lineno}: missing keys {sorted(missing)}")
        if entry["id"] in seen:
            raise AudioFormatError(f"{manifest_path}:{lineno}: duplicate id {entry['id']!r}")
        seen.add(entry["id"])
        entries.append(entry)
    if not entries:
        raise AudioFormatError(f"{manifest_path}: manifest is empty")
    return entries


def load_corpus(manifest_path: str | Path) -> list[Utterance]:
    """Load utterances listed in a manifest; paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    utterances = []
    for entry in read_manifest(manifest_path):
        wav_path = base / entry["path"]
        if not wav_path.exists():
            raise FileNotFoundError(f"{manifest_path}: missing audio file {entry['path']}")
        utterances.append(
            Utterance(
                id=entry["id"],
                waveform=read_wav(wav_path),
                class_label=int(entry["class_label"]),
                emotion_label=emotion_from_name(entry["emotion_label"]),
                source=entry["source"],
            )
        )
    return utterances


def corpus_summary(utterances: Sequence[Utterance]) -> dict:
    by_class: dict[int, int] = {}
    by_emotion: dict[str, int] = {}
    for u in utterances:
        by_class[u.class_label] = by_class.get(u.class_label, 0) + 1
        by_emotion[u.emotion_label.label] = by_emotion.get(u.emotion_label.label, 0) + 1
    return {
        "total": len(utterances),
        "classes": {str(k): by_class[k] for k in sorted(by_class)},
        "emotions": {k: by_emotion[k] for k in sorted(by_emotion)},
    }


def replace_waveform(u: Utterance, w: Waveform) -> Utterance:
    return replace(u, waveform=w)
