"""Backdoor dataset construction: split, victim selection, poison assembly.

The protocol is data-only. A clean corpus is split 95:5 into train/test, the
recognizer picks the training utterances carrying the dominant emotion, a
subset of those is trigger-converted and relabeled to the target class, and
the backdoor training set swaps the poisoned copies in for their sources.
Every step is deterministic under its seed and leaves the clean utterances
untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from emopoison.audio import quantize
from emopoison.corpus import Utterance, replace_waveform
from emopoison.emotions import EmotionCategory
from emopoison.errors import CapacityError
from emopoison.ser import SerModel, prosody_feature_matrix
from emopoison.triggers import BaseTrigger

DEFAULT_TEST_FRACTION = 0.05
POISON_ID_SUFFIX = ".poison"

POISON_RECORD_COLUMNS = (
    "source_id",
    "poisoned_id",
    "original_label",
    "original_emotion",
    "target_label",
    "trigger_kind",
    "target_emotion",
)


@dataclass(frozen=True)
class PoisonRecord:
    """Audit row for one poisoned utterance."""

    source_id: str
    poisoned_id: str
    original_label: int
    original_emotion: EmotionCategory
    target_label: int
    trigger_kind: str
    target_emotion: EmotionCategory | None


@dataclass(frozen=True)
class DatasetPartitions:
    """Every dataset fragment produced by one poisoning run.

    train/test partition the clean corpus; selected lists the victims drawn
    from train; poisoned holds their converted, relabeled copies; and
    backdoor_train is train with the victims swapped out for the copies.
    """

    all: tuple[Utterance, ...]
    train: tuple[Utterance, ...]
    test: tuple[Utterance, ...]
    selected: tuple[Utterance, ...]
    poisoned: tuple[Utterance, ...]
    backdoor_train: tuple[Utterance, ...]
    target_label: int
    trigger: BaseTrigger
    split_seed: int
    select_seed: int
    records: tuple[PoisonRecord, ...]

    @property
    def poisoning_rate(self) -> float:
        return len(self.selected) / len(self.train)


def split_dataset(
    corpus: Sequence[Utterance],
    test_fraction: float = DEFAULT_TEST_FRACTION,
    seed: int = 0,
) -> tuple[list[Utterance], list[Utterance]]:
    """Stratified train/test split; each class sends round(fraction*count), min 1.

    Deterministic for a given seed; both outputs come back sorted by id.
    """
    corpus = list(corpus)
    if len(corpus) < 20:
        raise ValueError(f"corpus too small to split ({len(corpus)} < 20)")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    by_class: dict[int, list[Utterance]] = {}
    for u in corpus:
        by_class.setdefault(u.class_label, []).append(u)
    train: list[Utterance] = []
    test: list[Utterance] = []
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda u: u.id)
        if len(members) < 2:
            raise ValueError(f"class {label} has {len(members)} member(s); need at least 2")
        n_test = int(np.floor(test_fraction * len(members) + 0.5))
        n_test = min(max(n_test, 1), len(members) - 1)
        rng = np.random.default_rng([seed, label])
        order = rng.permutation(len(members))
        test.extend(members[i] for i in order[:n_test])
        train.extend(members[i] for i in order[n_test:])
    train.sort(key=lambda u: u.id)
    test.sort(key=lambda u: u.id)
    return train, test


def predict_emotions(ser: SerModel, utterances: Sequence[Utterance]) -> dict[str, EmotionCategory]:
    """SER predictions keyed by utterance id, computed in one batch."""
    if not utterances:
        return {}
    X = prosody_feature_matrix([u.waveform for u in utterances])
    predicted = ser.predict(X)
    return {u.id: EmotionCategory(int(p)) for u, p in zip(utterances, predicted)}


def majority_predicted_emotion(predictions: Mapping[str, EmotionCategory]) -> EmotionCategory:
    """Most frequent predicted emotion; ties resolve in canonical order."""
    if not predictions:
        raise ValueError("no predictions to vote over")
    counts = np.zeros(len(EmotionCategory), dtype=np.int64)
    for emotion in predictions.values():
        counts[int(emotion)] += 1
    return EmotionCategory(int(np.argmax(counts)))


def select_poison_subset(
    train: Sequence[Utterance],
    ser: SerModel,
    pn: int,
    seed: int = 0,
    emotion: EmotionCategory | None = None,
    predictions: Mapping[str, EmotionCategory] | None = None,
) -> list[Utterance]:
    """Draw pn victims from the train members the SER assigns to one emotion.

    The pool is the majority predicted emotion unless `emotion` overrides it.
    Pass precomputed `predictions` to avoid a second SER pass. Returns the
    sample sorted by id.
    """
    train = list(train)
    if pn < 0:
        raise ValueError(f"pn must be non-negative, got {pn}")
    if predictions is None:
        predictions = predict_emotions(ser, train)
    pool_emotion = emotion if emotion is not None else majority_predicted_emotion(predictions)
    pool = sorted(
        (u for u in train if predictions[u.id] == pool_emotion),
        key=lambda u: u.id,
    )
    if pn > len(pool):
        raise CapacityError(
            f"pn={pn} exceeds the {len(pool)}-member {pool_emotion.label} pool"
        )
    rng = np.random.default_rng([seed, int(pool_emotion)])
    chosen = rng.choice(len(pool), size=pn, replace=False)
    return sorted((pool[i] for i in chosen), key=lambda u: u.id)


def generate_poisoned(
    selected: Sequence[Utterance],
    trigger: BaseTrigger,
    target_label: int,
    predicted_emotions: Mapping[str, EmotionCategory] | None = None,
) -> tuple[list[Utterance], list[PoisonRecord]]:
    """Trigger each victim and relabel it to the target class.

    Poisoned copies get the source id plus ".poison"; emotion-conversion
    triggers also stamp the target emotion on the copy. Sources are not
    modified. PoisonRecord.original_emotion uses the SER prediction when
    provided, otherwise the ground-truth label.
    """
    target_emotion = getattr(trigger, "target_emotion", None)
    poisoned: list[Utterance] = []
    records: list[PoisonRecord] = []
    for u in selected:
        try:
            converted = trigger.apply(u.waveform)
        except Exception as err:
            raise type(err)(f"trigger failed on {u.id}: {err}") from err
        copy = replace_waveform(u, quantize(converted))
        emotion = target_emotion if target_emotion is not None else u.emotion_label
        copy = Utterance(
            id=u.id + POISON_ID_SUFFIX,
            waveform=copy.waveform,
            class_label=target_label,
            emotion_label=emotion,
            source="poison",
        )
        poisoned.append(copy)
        original_emotion = (
            predicted_emotions[u.id] if predicted_emotions is not None else u.emotion_label
        )
        records.append(
            PoisonRecord(
                source_id=u.id,
                poisoned_id=copy.id,
                original_label=u.class_label,
                original_emotion=original_emotion,
                target_label=target_label,
                trigger_kind=trigger.kind,
                target_emotion=target_emotion,
            )
        )
    return poisoned, records


def build_backdoor_dataset(
    train: Sequence[Utterance],
    selected: Sequence[Utterance],
    poisoned: Sequence[Utterance],
) -> list[Utterance]:
    """Swap the selected members of train for their poisoned copies; sort by id."""
    train_ids = {u.id for u in train}
    selected_ids = {u.id for u in selected}
    if not selected_ids <= train_ids:
        stray = sorted(selected_ids - train_ids)[:5]
        raise ValueError(f"selected utterances not in train set: {stray}")
    if len(selected) != len(poisoned):
        raise ValueError(
            f"selected and poisoned sizes differ: {len(selected)} vs {len(poisoned)}"
        )
    kept = [u for u in train if u.id not in selected_ids]
    return sorted(kept + list(poisoned), key=lambda u: u.id)


def build_partitions(
    corpus: Sequence[Utterance],
    ser: SerModel,
    trigger: BaseTrigger,
    target_label: int,
    pn: int,
    split_seed: int = 0,
    select_seed: int = 0,
    test_fraction: float = DEFAULT_TEST_FRACTION,
    pool_emotion: EmotionCategory | None = None,
) -> DatasetPartitions:
    """Run the whole protocol on a clean corpus and freeze the result."""
    train, test = split_dataset(corpus, test_fraction, split_seed)
    predictions = predict_emotions(ser, train)
    selected = select_poison_subset(
        train, ser, pn, seed=select_seed, emotion=pool_emotion, predictions=predictions
    )
    poisoned, records = generate_poisoned(selected, trigger, target_label, predictions)
    backdoor_train = build_backdoor_dataset(train, selected, poisoned)
    return DatasetPartitions(
        all=tuple(corpus),
        train=tuple(train),
        test=tuple(test),
        selected=tuple(selected),
        poisoned=tuple(poisoned),
        backdoor_train=tuple(backdoor_train),
        target_label=target_label,
        trigger=trigger,
        split_seed=split_seed,
        select_seed=select_seed,
        records=tuple(records),
    )


def write_poison_records(records: Sequence[PoisonRecord], path: str | Path) -> None:
    """Audit CSV with one row per poisoned utterance."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(POISON_RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.source_id,
                    r.poisoned_id,
                    r.original_label,
                    r.original_emotion.label,
                    r.target_label,
                    r.trigger_kind,
                    r.target_emotion.label if r.target_emotion is not None else "",
                ]
            )
