"""Victim keyword classifier: a small CNN over log-mel spectrograms.

Two 3x3 conv + 2x2 max-pool stages (8 filters each), a 64-unit dense layer,
and K output logits, trained with mean cross-entropy and Adam. Everything is
plain numpy with channels-last layout; convolutions run as im2col GEMMs so a
60-epoch training on a couple thousand clips stays in the minutes range on
one core. Gradients are hand-derived and checked against central finite
differences in the test suite.

Float32 is the training dtype; float64 is available for gradient checks where
finite differences need the headroom.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin

from emopoison.errors import ConfigError, TrainingDivergedError
from emopoison.features import mel_spectrogram

DEFAULT_BATCH_SIZE = 64
DEFAULT_EPOCHS = 60
DEFAULT_LR = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

N_FILTERS = 8
KERNEL = 3
HIDDEN = 64

# log-mel power spans roughly [ln(1e-10), ln(10)]; this affine map puts
# silence near -1 and loud frames near +1 without data-dependent statistics.
INPUT_CENTER = -11.5
INPUT_SCALE = 11.5

PARAM_NAMES = (
    "conv1_w",
    "conv1_b",
    "conv2_w",
    "conv2_b",
    "dense_w",
    "dense_b",
    "out_w",
    "out_b",
)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the standard recipe."""

    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """From-scratch CNN with sklearn-style fit/predict over (n, frames, mels) arrays."""

    def __init__(
        self,
        n_classes: int = 10,
        batch_size: int = DEFAULT_BATCH_SIZE,
        epochs: int = DEFAULT_EPOCHS,
        lr: float = DEFAULT_LR,
        seed: int = 0,
        dtype: str = "float32",
    ):
        self.n_classes = n_classes
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.dtype = dtype

    # -- parameter handling -------------------------------------------------

    def init_params(self, input_shape: tuple[int, int]) -> None:
        """Seeded uniform init scaled by 1/sqrt(fan_in) for every layer."""
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        h, w = input_shape
        h1, w1 = (h - KERNEL + 1) // 2, (w - KERNEL + 1) // 2
        h2, w2 = (h1 - KERNEL + 1) // 2, (w1 - KERNEL + 1) // 2
        if h2 < 1 or w2 < 1:
            raise ConfigError(f"input {input_shape} too small for two conv/pool stages")
        flat = h2 * w2 * N_FILTERS
        dt = np.dtype(self.dtype)
        rng = np.random.default_rng([self.seed])

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dt)

        self.params_ = {
            "conv1_w": uniform((KERNEL * KERNEL, N_FILTERS), KERNEL * KERNEL),
            "conv1_b": np.zeros(N_FILTERS, dtype=dt),
            "conv2_w": uniform((N_FILTERS * KERNEL * KERNEL, N_FILTERS), N_FILTERS * KERNEL * KERNEL),
            "conv2_b": np.zeros(N_FILTERS, dtype=dt),
            "dense_w": uniform((flat, HIDDEN), flat),
            "dense_b": np.zeros(HIDDEN, dtype=dt),
            "out_w": uniform((HIDDEN, self.n_classes), HIDDEN),
            "out_b": np.zeros(self.n_classes, dtype=dt),
        }
        self.input_shape_ = (h, w)
        self.classes_ = np.arange(self.n_classes)

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise ValueError("model is not fitted")

    # -- forward / backward -------------------------------------------------

    def _prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.dtype(self.dtype))
        if X.ndim == 2:
            X = X[None, :, :]
        if X.ndim != 3 or X.shape[1:] != self.input_shape_:
            raise ValueError(f"expected inputs of shape (n, {self.input_shape_[0]}, {self.input_shape_[1]}), got {X.shape}")
        return (X - INPUT_CENTER) / INPUT_SCALE

    def forward(self, X) -> np.ndarray:
        """Logits for a batch; see _forward_cached for the layer chain."""
        self._check_fitted()
        logits, _ = self._forward_cached(self._prepare(X))
        return logits

    def _forward_cached(self, x: np.ndarray):
        p = self.params_
        cols1 = sliding_window_view(x, (KERNEL, KERNEL), axis=(1, 2))
        n, h1, w1 = cols1.shape[:3]
        cols1 = cols1.reshape(n, h1 * w1, KERNEL * KERNEL)
        a1 = np.matmul(cols1, p["conv1_w"]).reshape(n, h1, w1, N_FILTERS) + p["conv1_b"]
        r1 = np.maximum(a1, 0.0)
        pool1 = _pool2x2(r1)

        cols2 = sliding_window_view(pool1, (KERNEL, KERNEL), axis=(1, 2))
        h2, w2 = cols2.shape[1:3]
        cols2 = cols2.reshape(n, h2 * w2, N_FILTERS * KERNEL * KERNEL)
        a2 = np.matmul(cols2, p["conv2_w"]).reshape(n, h2, w2, N_FILTERS) + p["conv2_b"]
        r2 = np.maximum(a2, 0.0)
        pool2 = _pool2x2(r2)

        flat = pool2.reshape(n, -1)
        a3 = flat @ p["dense_w"] + p["dense_b"]
        r3 = np.maximum(a3, 0.0)
        logits = r3 @ p["out_w"] + p["out_b"]
        cache = (x, cols1, a1, r1, pool1, cols2, a2, r2, pool2, flat, a3, r3)
        return logits, cache

    def loss_and_grad(self, X, y) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy over the batch and gradients for every parameter."""
        self._check_fitted()
        y = np.asarray(y, dtype=np.int64)
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        x = self._prepare(X)
        if x.shape[0] != y.shape[0]:
            raise ValueError("one label per input required")
        logits, cache = self._forward_cached(x)
        self._last_logits = logits
        x, cols1, a1, r1, pool1, cols2, a2, r2, pool2, flat, a3, r3 = cache
        n = x.shape[0]
        p = self.params_

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        eps = np.finfo(probs.dtype).tiny
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), y], eps))))

        d_logits = probs.copy()
        d_logits[np.arange(n), y] -= 1.0
        d_logits /= n

        grads: dict[str, np.ndarray] = {}
        grads["out_w"] = r3.T @ d_logits
        grads["out_b"] = d_logits.sum(axis=0)
        d_r3 = d_logits @ p["out_w"].T
        d_a3 = d_r3 * (a3 > 0)
        grads["dense_w"] = flat.T @ d_a3
        grads["dense_b"] = d_a3.sum(axis=0)
        d_flat = d_a3 @ p["dense_w"].T

        d_pool2 = d_flat.reshape(pool2.shape)
        d_r2 = _pool2x2_backward(r2, pool2, d_pool2)
        d_a2 = d_r2 * (a2 > 0)
        d_a2_rows = d_a2.reshape(n, -1, N_FILTERS)
        grads["conv2_w"] = np.tensordot(cols2, d_a2_rows, axes=([0, 1], [0, 1]))
        grads["conv2_b"] = d_a2_rows.sum(axis=(0, 1))
        d_cols2 = np.matmul(d_a2_rows, p["conv2_w"].T)
        d_pool1 = _col2im(d_cols2, pool1.shape, d_a2.shape[1], d_a2.shape[2])

        d_r1 = _pool2x2_backward(r1, pool1, d_pool1)
        d_a1 = d_r1 * (a1 > 0)
        d_a1_rows = d_a1.reshape(n, -1, N_FILTERS)
        grads["conv1_w"] = np.tensordot(cols1, d_a1_rows, axes=([0, 1], [0, 1]))
        grads["conv1_b"] = d_a1_rows.sum(axis=(0, 1))
        return loss, grads

    # -- training -----------------------------------------------------------

    def fit(self, X, y, X_test=None, y_test=None):
        X = np.asarray(X, dtype=np.dtype(self.dtype))
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 3 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise ValueError("X must be (n, frames, mels) with one label per row")
        config = TrainConfig(self.batch_size, self.epochs, self.lr, self.seed)
        self.init_params(X.shape[1:])
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

        adam_m = {k: np.zeros_like(v) for k, v in self.params_.items()}
        adam_v = {k: np.zeros_like(v) for k, v in self.params_.items()}
        step = 0
        rng = np.random.default_rng([config.seed, 1])
        history: list[EpochStats] = []
        n = X.shape[0]
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            epoch_loss = 0.0
            correct = 0
            for start in range(0, n, config.batch_size):
                batch = order[start : start + config.batch_size]
                loss, grads = self.loss_and_grad(X[batch], y[batch])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"training diverged at epoch {epoch} batch {start // config.batch_size}"
                    )
                logits = self._last_logits
                correct += int(np.sum(np.argmax(logits, axis=1) == y[batch]))
                epoch_loss += loss * batch.size
                step += 1
                scale1 = 1.0 - ADAM_BETA1**step
                scale2 = 1.0 - ADAM_BETA2**step
                for key, grad in grads.items():
                    m = adam_m[key]
                    v = adam_v[key]
                    m += (1.0 - ADAM_BETA1) * (grad - m)
                    v += (1.0 - ADAM_BETA2) * (np.square(grad) - v)
                    self.params_[key] -= config.lr * (m / scale1) / (
                        np.sqrt(v / scale2) + ADAM_EPS
                    )
            test_acc = float("nan")
            if X_test is not None and y_test is not None and len(y_test) > 0:
                test_acc = float(np.mean(self.predict(X_test) == np.asarray(y_test)))
            history.append(
                EpochStats(epoch, epoch_loss / n, correct / n, test_acc)
            )
        self.history_ = history
        return self

    def predict_logits(self, X, batch_size: int = 256) -> np.ndarray:
        self._check_fitted()
        X = np.asarray(X, dtype=np.dtype(self.dtype))
        if X.ndim == 2:
            X = X[None, :, :]
        chunks = [self.forward(X[i : i + batch_size]) for i in range(0, X.shape[0], batch_size)]
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        """Class ids; ties resolve to the lowest id."""
        return np.argmax(self.predict_logits(X), axis=1)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.predict_logits(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)


def _pool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pool, stride 2, channels last; odd trailing rows/cols dropped."""
    h, w = x.shape[1] - x.shape[1] % 2, x.shape[2] - x.shape[2] % 2
    x = x[:, :h, :w, :]
    rows = np.maximum(x[:, 0::2, :, :], x[:, 1::2, :, :])
    return np.maximum(rows[:, :, 0::2, :], rows[:, :, 1::2, :])


def _pool2x2_backward(x: np.ndarray, pooled: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Route delta to the first position in each window holding the max."""
    grad = np.zeros_like(x)
    taken = np.zeros(pooled.shape, dtype=bool)
    h, w = pooled.shape[1] * 2, pooled.shape[2] * 2
    for di in (0, 1):
        for dj in (0, 1):
            window = x[:, di:h:2, dj:w:2, :]
            hit = (window == pooled) & ~taken
            grad[:, di:h:2, dj:w:2, :] = delta * hit
            taken |= hit
    return grad


def _col2im(d_cols: np.ndarray, in_shape: tuple, h_out: int, w_out: int) -> np.ndarray:
    """Fold column gradients back onto the conv input (valid conv, stride 1)."""
    n = d_cols.shape[0]
    c = in_shape[3]
    g = d_cols.reshape(n, h_out, w_out, c, KERNEL, KERNEL)
    grad = np.zeros(in_shape, dtype=d_cols.dtype)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            grad[:, di : di + h_out, dj : dj + w_out, :] += g[:, :, :, :, di, dj]
    return grad


# -- utterance-level wrappers ---------------------------------------------


def logmel_features(utterances, cache: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """(n, frames, mels) float32 log-mel stack; reuses cache entries by id."""
    rows = []
    for u in utterances:
        if cache is not None and u.id in cache:
            rows.append(cache[u.id])
            continue
        mel = mel_spectrogram(u.waveform).frames.astype(np.float32)
        if cache is not None:
            cache[u.id] = mel
        rows.append(mel)
    return np.stack(rows)


def train_victim(
    config: TrainConfig,
    train_set,
    test_set,
    n_classes: int | None = None,
    feature_cache: dict[str, np.ndarray] | None = None,
) -> tuple[ConvNetClassifier, list[EpochStats]]:
    """Train on utterances; features are computed once and cached by id."""
    train_set = list(train_set)
    test_set = list(test_set)
    if not train_set or not test_set:
        raise ValueError("train and test sets must both be nonempty")
    if n_classes is None:
        n_classes = max(u.class_label for u in train_set + test_set) + 1
    X = logmel_features(train_set, feature_cache)
    y = np.array([u.class_label for u in train_set])
    X_test = logmel_features(test_set, feature_cache)
    y_test = np.array([u.class_label for u in test_set])
    model = ConvNetClassifier(
        n_classes=n_classes,
        batch_size=config.batch_size,
        epochs=config.epochs,
        lr=config.lr,
        seed=config.seed,
    )
    model.fit(X, y, X_test, y_test)
    return model, model.history_


def predict_utterance(model: ConvNetClassifier, utterance) -> int:
    """Class id for one utterance's log-mel features; ties -> lowest id."""
    mel = mel_spectrogram(utterance.waveform).frames.astype(np.float32)
    return int(model.predict(mel[None, :, :])[0])


# -- persistence ------------------------------------------------------------


def save_victim(model: ConvNetClassifier, path: str | Path) -> None:
    """Checkpoint as named hexfloat tensors under a model-v1 header."""
    model._check_fitted()
    lines = ["model-v1"]
    lines.append(f"n_classes {model.n_classes}")
    lines.append(f"dtype {model.dtype}")
    lines.append(f"seed {model.seed}")
    lines.append(f"input_shape {model.input_shape_[0]} {model.input_shape_[1]}")
    for name in PARAM_NAMES:
        tensor = model.params_[name]
        lines.append(f"tensor {name} " + " ".join(str(d) for d in tensor.shape))
        lines.append(" ".join(float(v).hex() for v in tensor.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_victim(path: str | Path) -> ConvNetClassifier:
    """Exact (bit-identical) round trip of save_victim."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "model-v1":
        raise ValueError(f"{path}: expected 'model-v1' header")
    header: dict[str, list[str]] = {}
    tensors: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "tensor":
            name = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            values = [float.fromhex(v) for v in lines[i + 1].split()]
            tensors[name] = np.array(values).reshape(shape)
            i += 2
        else:
            header[parts[0]] = parts[1:]
            i += 1
    try:
        model = ConvNetClassifier(
            n_classes=int(header["n_classes"][0]),
            seed=int(header["seed"][0]),
            dtype=header["dtype"][0],
        )
        dt = np.dtype(model.dtype)
        model.params_ = {name: tensors[name].astype(dt) for name in PARAM_NAMES}
        model.input_shape_ = (int(header["input_shape"][0]), int(header["input_shape"][1]))
    except KeyError as missing:
        raise ValueError(f"{path}: missing field {missing}") from None
    model.classes_ = np.arange(model.n_classes)
    return model


def save_history_csv(history: Sequence[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "train_acc", "test_acc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.loss), repr(row.train_acc), repr(row.test_acc)])
