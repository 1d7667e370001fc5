"""Attack metrics: success rate, accuracy variance, and distortion measures.

ASR counts only test inputs whose original label differs from the target;
inputs already carrying the target label are excluded from the denominator
so a do-nothing trigger cannot inflate the rate. AV is the absolute
percentage-point gap in clean accuracy between the baseline and backdoored
models, measured on the untriggered test set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from emopoison.audio import Waveform
from emopoison.corpus import Utterance, replace_waveform
from emopoison.features import stft
from emopoison.triggers import BaseTrigger
from emopoison.victim import ConvNetClassifier, logmel_features

DEFAULT_ASR_THRESHOLD = 0.99
_LSD_MAGNITUDE_FLOOR = 1e-10

ASR_DEFINITION = (
    "asr = (triggered test inputs predicted as the target label) / "
    "(test inputs whose original label differs from the target); "
    "inputs already labeled with the target are excluded"
)


@dataclass(frozen=True)
class DistortionReport:
    """Objective trigger-quality proxies for one clean/triggered pair."""

    lsd: float
    snr_db: float


@dataclass(frozen=True)
class AttackReport:
    """Everything one attack run measured, plus the seeds that produced it."""

    run_id: str
    trigger: Mapping[str, object]
    target_label: int
    pn: int
    asr: float
    av_points: float
    clean_acc_baseline: float
    clean_acc_backdoored: float
    per_class_asr: Mapping[int, float]
    ser_micro_f1: float
    ser_macro_f1: float
    lsd: float
    snr_db: float
    seeds: Mapping[str, int]
    asr_definition: str = ASR_DEFINITION

    def __post_init__(self) -> None:
        for name in ("asr", "clean_acc_baseline", "clean_acc_backdoored"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        expected = abs(self.clean_acc_baseline - self.clean_acc_backdoored) * 100.0
        if abs(self.av_points - expected) > 1e-9:
            raise ValueError(f"av_points={self.av_points} inconsistent with accuracies")


@dataclass(frozen=True)
class SweepPoint:
    pn: int
    asr: float
    av_points: float
    report: AttackReport | None = None


@dataclass(frozen=True)
class SweepResult:
    """ASR/AV against poison count, plus the cheapest count that clears the bar."""

    points: tuple[SweepPoint, ...]
    asr_threshold: float = DEFAULT_ASR_THRESHOLD
    target_emotion: str | None = None

    def __post_init__(self) -> None:
        pns = [p.pn for p in self.points]
        if any(b <= a for a, b in zip(pns, pns[1:])):
            raise ValueError(f"pn values must be strictly increasing, got {pns}")

    @property
    def minimal_pn(self) -> int | None:
        for p in self.points:
            if p.asr >= self.asr_threshold:
                return p.pn
        return None


def classification_accuracy(
    model: ConvNetClassifier,
    utterances: Sequence[Utterance],
    feature_cache: dict | None = None,
) -> float:
    """Fraction of utterances whose predicted class matches the label."""
    if not utterances:
        raise ValueError("cannot score an empty dataset")
    X = logmel_features(utterances, feature_cache)
    y = np.array([u.class_label for u in utterances])
    return float(np.mean(model.predict(X) == y))


def trigger_test_inputs(
    test_set: Sequence[Utterance],
    trigger: BaseTrigger,
    target_label: int,
) -> list[Utterance]:
    """Apply the trigger to every test input not already labeled target."""
    eligible = [u for u in test_set if u.class_label != target_label]
    return [replace_waveform(u, trigger.apply(u.waveform)) for u in eligible]


def attack_success_rate(
    model: ConvNetClassifier,
    test_set: Sequence[Utterance],
    trigger: BaseTrigger,
    target_label: int,
    triggered: Sequence[Utterance] | None = None,
) -> tuple[float, dict[int, float]]:
    """ASR plus a per-original-class breakdown.

    Pass precomputed `triggered` utterances (from trigger_test_inputs) to
    skip re-running the conversion.
    """
    if triggered is None:
        triggered = trigger_test_inputs(test_set, trigger, target_label)
    if not triggered:
        raise ValueError(
            f"no test inputs with label != {target_label}; asr is undefined"
        )
    X = logmel_features(triggered)
    predicted = model.predict(X)
    hits_by_class: dict[int, list[int]] = {}
    for u, p in zip(triggered, predicted):
        hits_by_class.setdefault(u.class_label, []).append(int(p == target_label))
    breakdown = {
        label: float(np.mean(hits)) for label, hits in sorted(hits_by_class.items())
    }
    asr = float(np.mean(predicted == target_label))
    return asr, breakdown


def accuracy_variance(
    baseline: ConvNetClassifier,
    backdoored: ConvNetClassifier,
    test_set: Sequence[Utterance],
    feature_cache: dict | None = None,
) -> float:
    """Absolute clean-accuracy gap between the two models, in points."""
    acc_a = classification_accuracy(baseline, test_set, feature_cache)
    acc_b = classification_accuracy(backdoored, test_set, feature_cache)
    return abs(acc_a - acc_b) * 100.0


def log_spectral_distance(a: Waveform, b: Waveform) -> float:
    """Mean per-frame RMS gap between log magnitude spectra, in dB."""
    if a.samples.size != b.samples.size:
        raise ValueError(
            f"length mismatch: {a.samples.size} vs {b.samples.size} samples"
        )
    mag_a = stft(a).magnitude()
    mag_b = stft(b).magnitude()
    log_a = 20.0 * np.log10(np.maximum(mag_a, _LSD_MAGNITUDE_FLOOR))
    log_b = 20.0 * np.log10(np.maximum(mag_b, _LSD_MAGNITUDE_FLOOR))
    per_frame = np.sqrt(np.mean(np.square(log_a - log_b), axis=1))
    return float(np.mean(per_frame))


def signal_to_noise_db(clean: Waveform, modified: Waveform) -> float:
    """SNR of the clean signal against the modification residual; inf if identical."""
    if clean.samples.size != modified.samples.size:
        raise ValueError(
            f"length mismatch: {clean.samples.size} vs {modified.samples.size} samples"
        )
    noise = modified.samples - clean.samples
    noise_power = float(np.sum(np.square(noise)))
    if noise_power == 0.0:
        return float("inf")
    signal_power = float(np.sum(np.square(clean.samples)))
    if signal_power == 0.0:
        return float("-inf")
    return 10.0 * np.log10(signal_power / noise_power)


def distortion_report(clean: Waveform, triggered: Waveform) -> DistortionReport:
    return DistortionReport(
        lsd=log_spectral_distance(clean, triggered),
        snr_db=signal_to_noise_db(clean, triggered),
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def spearman_rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; 0.0 when either input is constant."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.size != ya.size:
        raise ValueError(f"length mismatch: {xa.size} vs {ya.size}")
    if xa.size < 2:
        raise ValueError("need at least two points")
    rx = _average_ranks(xa) - (xa.size + 1) / 2.0
    ry = _average_ranks(ya) - (ya.size + 1) / 2.0
    denom = float(np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(rx * ry) / denom)
