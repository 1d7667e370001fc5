"""Prosody-feature speech emotion recognizer.

A multinomial logistic model over the 6-dim ProsodyStats vector. It stands in
for a large pretrained SER: the synthetic presets are linearly separable in
prosody space, so this is the smallest classifier that does the job. The
recognizer picks the dominant emotion of a class (the victim pool for
poisoning) and scores how convincingly converted audio lands on its target
emotion.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from emopoison.audio import Waveform
from emopoison.emotions import EmotionCategory
from emopoison.features import ProsodyStats, prosody_stats

DEFAULT_SER_EPOCHS = 400
DEFAULT_SER_LR = 0.5
_STD_FLOOR = 1e-8

N_PROSODY_FEATURES = len(ProsodyStats.FEATURE_NAMES)


def prosody_feature_matrix(waveforms: Sequence[Waveform]) -> np.ndarray:
    """Stack ProsodyStats vectors into an (n, 6) float64 design matrix."""
    if not waveforms:
        raise ValueError("need at least one waveform")
    return np.stack([prosody_stats(w).as_vector() for w in waveforms])


class SerModel(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression on normalized prosody features.

    Trained by full-batch gradient descent; weight init is seeded so the
    same data and seed always give identical weights. Normalization
    constants come from the training data and are frozen into the model.
    """

    def __init__(
        self,
        epochs: int = DEFAULT_SER_EPOCHS,
        lr: float = DEFAULT_SER_LR,
        seed: int = 0,
    ):
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, d) with one label per row")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        if self.epochs <= 0 or self.lr <= 0.0:
            raise ValueError("epochs and lr must be positive")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("training data must contain at least two classes")
        n, d = X.shape
        k = self.classes_.size
        class_index = np.searchsorted(self.classes_, y)

        self.feature_mean_ = X.mean(axis=0)
        self.feature_std_ = np.maximum(X.std(axis=0), _STD_FLOOR)
        Xn = (X - self.feature_mean_) / self.feature_std_

        rng = np.random.default_rng([self.seed])
        weights = rng.normal(0.0, 0.01, size=(k, d))
        bias = np.zeros(k)
        onehot = np.zeros((n, k))
        onehot[np.arange(n), class_index] = 1.0
        for _ in range(self.epochs):
            probs = _softmax(Xn @ weights.T + bias)
            grad = probs - onehot
            weights -= self.lr * (grad.T @ Xn) / n
            bias -= self.lr * grad.mean(axis=0)
        self.weights_ = weights
        self.bias_ = bias
        self.n_features_in_ = d
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        Xn = (X - self.feature_mean_) / self.feature_std_
        return Xn @ self.weights_.T + self.bias_

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    def _check_fitted(self) -> None:
        if not hasattr(self, "weights_"):
            raise ValueError("model is not fitted")


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def train_ser(
    corpus,
    epochs: int = DEFAULT_SER_EPOCHS,
    lr: float = DEFAULT_SER_LR,
    seed: int = 0,
) -> SerModel:
    """Train the recognizer on labeled utterances (emotion labels are truth)."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    X = prosody_feature_matrix([u.waveform for u in corpus])
    y = np.array([int(u.emotion_label) for u in corpus])
    return SerModel(epochs=epochs, lr=lr, seed=seed).fit(X, y)


def classify_emotion(model: SerModel, utterance_or_waveform) -> tuple[EmotionCategory, np.ndarray]:
    """Predict one utterance's emotion; returns (category, softmax scores).

    Ties in the score vector resolve to the canonical (smallest) category.
    Scores are ordered by model.classes_, sum 1.
    """
    waveform = getattr(utterance_or_waveform, "waveform", utterance_or_waveform)
    features = prosody_stats(waveform).as_vector()
    scores = model.predict_proba(features)[0]
    best = int(np.argmax(scores))
    return EmotionCategory(int(model.classes_[best])), scores


def majority_emotion(model: SerModel, dataset) -> EmotionCategory:
    """Most frequent predicted emotion over the dataset; ties go canonical."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    X = prosody_feature_matrix([u.waveform for u in dataset])
    predictions = model.predict(X)
    counts = np.bincount(predictions, minlength=len(EmotionCategory))
    return EmotionCategory(int(np.argmax(counts)))


@dataclass(frozen=True)
class F1Report:
    """Micro/macro F1 with per-class precision/recall and raw confusion counts.

    confusion[i][j] counts samples with true class i predicted as class j;
    index order follows `labels`. Classes absent from both the truths and
    the predictions are excluded from the macro mean. A per-class F1 whose
    precision+recall denominator is zero is defined as 0.
    """

    labels: tuple[int, ...]
    confusion: tuple[tuple[int, ...], ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    micro_f1: float
    macro_f1: float


def ser_f1(
    predictions: Sequence[EmotionCategory | int],
    truths: Sequence[EmotionCategory | int],
) -> F1Report:
    """F1 scores for single-label multiclass predictions.

    Micro-F1 pools counts over classes, which for single-label data equals
    plain accuracy. Macro-F1 averages per-class F1 over the classes present
    in either list.
    """
    pred = np.array([int(p) for p in predictions])
    true = np.array([int(t) for t in truths])
    if pred.size != true.size:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} truths")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    labels = np.unique(np.concatenate([pred, true]))
    index = {int(label): pos for pos, label in enumerate(labels)}
    k = labels.size
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true, pred):
        confusion[index[t], index[p]] += 1
    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros(k), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros(k), where=true_totals > 0)
    denom = precision + recall
    f1 = np.divide(2.0 * precision * recall, denom, out=np.zeros(k), where=denom > 0)
    micro = float(tp.sum() / confusion.sum())
    return F1Report(
        labels=tuple(int(v) for v in labels),
        confusion=tuple(tuple(int(c) for c in row) for row in confusion),
        precision=tuple(float(p) for p in precision),
        recall=tuple(float(r) for r in recall),
        micro_f1=micro,
        macro_f1=float(f1.mean()),
    )


def save_ser(model: SerModel, path: str | Path) -> None:
    """Write the fitted model as labeled text fields under a ser-v1 header."""
    model._check_fitted()
    lines = ["ser-v1"]
    lines.append("classes " + " ".join(str(int(c)) for c in model.classes_))
    lines.append("epochs " + str(model.epochs))
    lines.append("lr " + float(model.lr).hex())
    lines.append("seed " + str(model.seed))
    lines.append("feature_mean " + " ".join(v.hex() for v in model.feature_mean_))
    lines.append("feature_std " + " ".join(v.hex() for v in model.feature_std_))
    for i in range(model.classes_.size):
        lines.append(f"weights_{i} " + " ".join(v.hex() for v in model.weights_[i]))
    lines.append("bias " + " ".join(v.hex() for v in model.bias_))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ser(path: str | Path) -> SerModel:
    """Read a ser-v1 file back into a fitted SerModel; exact round trip."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != "ser-v1":
        raise ValueError(f"{path}: expected 'ser-v1' header, got {lines[0] if lines else 'nothing'}")
    fields: dict[str, list[str]] = {}
    for line in lines[1:]:
        name, *values = line.split()
        fields[name] = values
    try:
        classes = np.array([int(v) for v in fields["classes"]])
        model = SerModel(
            epochs=int(fields["epochs"][0]),
            lr=float.fromhex(fields["lr"][0]),
            seed=int(fields["seed"][0]),
        )
        model.classes_ = classes
        model.feature_mean_ = np.array([float.fromhex(v) for v in fields["feature_mean"]])
        model.feature_std_ = np.array([float.fromhex(v) for v in fields["feature_std"]])
        model.weights_ = np.array(
            [[float.fromhex(v) for v in fields[f"weights_{i}"]] for i in range(classes.size)]
        )
        model.bias_ = np.array([float.fromhex(v) for v in fields["bias"]])
    except KeyError as missing:
        raise ValueError(f"{path}: missing field {missing}") from None
    model.n_features_in_ = model.weights_.shape[1]
    return model
