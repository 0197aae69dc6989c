"""Multinomial logistic regression head and a small ReLU MLP, both trained with
mini-batch gradient descent and hand-written gradients.

Weight matrices are stored (out, in): logits = x @ W.T + b.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SOFTMAX_MAGIC = b"SMAX1"
MLP_MAGIC = b"SMLP1"
VARIANCE_FLOOR = 1e-6


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    l2_penalty: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.epochs < 0 or self.l2_penalty < 0:
            raise ValueError("epochs and l2_penalty must be non-negative")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.zeros((labels.shape[0], num_classes))
    y[np.arange(labels.shape[0]), labels] = 1.0
    return y


# ---------------------------------------------------------------------------
# softmax head


@dataclass(eq=False)
class SoftmaxClassifier:
    weights: np.ndarray  # (C, F)
    bias: np.ndarray  # (C,)
    mean: np.ndarray = None  # per-feature standardization
    scale: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        f = self.weights.shape[1]
        self.mean = np.zeros(f) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.scale = np.ones(f) if self.scale is None else np.asarray(self.scale, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def standardize(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {features.shape[-1]}")
        return (features - self.mean) / self.scale

    def logits(self, features) -> np.ndarray:
        return self.standardize(features) @ self.weights.T + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return softmax(self.logits(features))

    def predict(self, features):
        z = self.logits(features)
        return z.argmax(axis=-1), softmax(z)

    def loss(self, features, labels) -> float:
        z = self.logits(features)
        return float(-log_softmax(z)[np.arange(len(labels)), labels].mean())

    def _grads(self, x_std: np.ndarray, y: np.ndarray, l2: float):
        """Objective and (dW, db) for already-standardized features."""
        z = x_std @ self.weights.T + self.bias
        logp = log_softmax(z)
        n = x_std.shape[0]
        loss = -(logp * y).sum() / n + l2 * (self.weights ** 2).sum()
        dz = (np.exp(logp) - y) / n
        return loss, dz.T @ x_std + 2 * l2 * self.weights, dz.sum(axis=0)

    def to_bytes(self) -> bytes:
        c, f = self.weights.shape
        return b"".join([SOFTMAX_MAGIC, struct.pack("<II", c, f),
                         *(a.astype("<f8").tobytes() for a in (self.weights, self.bias, self.mean, self.scale))])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SoftmaxClassifier":
        data = Path(path).read_bytes()
        if data[:5] != SOFTMAX_MAGIC:
            raise ValueError(f"{path}: not an SMAX1 model")
        c, f = struct.unpack_from("<II", data, 5)
        arrays = np.frombuffer(data, "<f8", offset=13)
        if arrays.size != c * f + c + 2 * f:
            raise ValueError(f"{path}: size does not match header")
        w, rest = arrays[:c * f].reshape(c, f), arrays[c * f:]
        return cls(w.copy(), rest[:c].copy(), rest[c:c + f].copy(), rest[c + f:].copy())


def _check_finite(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(epoch, loss)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_softmax(features, labels, cfg: TrainConfig = TrainConfig(), num_classes: int | None = None,
                  standardize: bool = True) -> SoftmaxClassifier:
    """Mini-batch gradient descent on mean cross-entropy + l2 * ||W||^2, from W = 0.

    With ``standardize`` the features are z-scored using these training
    statistics (variance floored at 1e-6) and the statistics are kept in the model.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ValueError("features must be (N, F) aligned with labels")
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    f = x.shape[1]
    if standardize:
        mean, scale = x.mean(axis=0), np.sqrt(np.maximum(x.var(axis=0), VARIANCE_FLOOR))
    else:
        mean, scale = np.zeros(f), np.ones(f)
    model = SoftmaxClassifier(np.zeros((c, f)), np.zeros(c), mean, scale)
    x_std = model.standardize(x)
    y = _one_hot(labels, c)
    rng = np.random.default_rng(cfg.seed)

    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(x), cfg.batch_size, rng):
            loss, dw, db = model._grads(x_std[idx], y[idx], cfg.l2_penalty)
            _check_finite(loss, epoch)
            model.weights -= cfg.learning_rate * dw
            model.bias -= cfg.learning_rate * db
        loss = model._grads(x_std, y, cfg.l2_penalty)[0]
        _check_finite(loss, epoch)
        log.info("softmax epoch %d loss %.6f", epoch, loss)
    return model


# ---------------------------------------------------------------------------
# target MLP


@dataclass(eq=False)
class TargetMLP:
    weights: list  # per layer (out, in)
    biases: list
    input_shape: tuple = field(default=None)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if self.input_shape is None:
            self.input_shape = (self.weights[0].shape[1],)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if math.prod(self.input_shape) != self.weights[0].shape[1]:
            raise ValueError("input_shape does not match first layer width")

    @classmethod
    def initialize(cls, input_shape, hidden, num_classes: int, seed: int = 0) -> "TargetMLP":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        sizes = [math.prod(input_shape), *hidden, num_classes]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            s = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, tuple(input_shape))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def _flatten(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        d = self.layer_sizes[0]
        if x.shape == self.input_shape or x.shape == (d,):
            return x.reshape(1, d), True
        if x.shape[1:] == self.input_shape or x.shape[1:] == (d,):
            return x.reshape(x.shape[0], d), False
        raise ValueError(f"input shape {x.shape} does not match model input {self.input_shape}")

    def _forward(self, x2d: np.ndarray) -> list[np.ndarray]:
        """Activations [x, h_1, ..., logits] (hidden layers post-ReLU)."""
        acts = [x2d]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            acts.append(np.maximum(z, 0) if i < len(self.weights) - 1 else z)
        return acts

    def logits(self, x) -> np.ndarray:
        x2d, single = self._flatten(x)
        z = self._forward(x2d)[-1]
        return z[0] if single else z

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x):
        z = self.logits(x)
        return z.argmax(axis=-1), softmax(z)

    def loss(self, x, labels) -> float:
        x2d, _ = self._flatten(x)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        logp = log_softmax(self._forward(x2d)[-1])
        return float(-logp[np.arange(len(labels)), labels].mean())

    def _backward(self, acts, dz):
        """Backpropagate dL/dlogits; returns (weight grads, bias grads, dL/dx)."""
        dws, dbs = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            dws.append(dz.T @ acts[i])
            dbs.append(dz.sum(axis=0))
            dz = dz @ self.weights[i]
            if i > 0:
                dz = dz * (acts[i] > 0)
        return dws[::-1], dbs[::-1], dz

    def param_gradients(self, x, labels, l2: float = 0.0):
        """Mean cross-entropy + l2 * sum ||W||^2 and its gradients."""
        x2d, _ = self._flatten(x)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        acts = self._forward(x2d)
        logp = log_softmax(acts[-1])
        n = x2d.shape[0]
        y = _one_hot(labels, self.num_classes)
        loss = -(logp * y).sum() / n + l2 * sum((w ** 2).sum() for w in self.weights)
        dws, dbs, _ = self._backward(acts, (np.exp(logp) - y) / n)
        dws = [dw + 2 * l2 * w for dw, w in zip(dws, self.weights)]
        return loss, dws, dbs

    def input_gradient(self, x, labels) -> np.ndarray:
        """Gradient of the per-sample cross-entropy w.r.t. the input pixels."""
        x2d, single = self._flatten(x)
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.shape[0] != x2d.shape[0]:
            raise ValueError("one label per input required")
        acts = self._forward(x2d)
        dz = softmax(acts[-1]) - _one_hot(labels, self.num_classes)
        grad = self._backward(acts, dz)[2]
        shape = np.shape(x)
        return grad.reshape(shape)

    def class_score_gradients(self, x) -> np.ndarray:
        """Gradient of every logit w.r.t. the input: (C,) + x.shape for one
        image, (N, C) + image shape for a batch."""
        x2d, single = self._flatten(x)
        acts = self._forward(x2d)
        # J[n, c, :] = W_L[c] diag(mask_{L-1}) W_{L-1} ... W_1
        jac = np.broadcast_to(self.weights[-1], (x2d.shape[0],) + self.weights[-1].shape)
        for i in range(len(self.weights) - 1, 0, -1):
            jac = (jac * (acts[i] > 0)[:, None, :]) @ self.weights[i - 1]
        shape = np.shape(x)
        if single:
            return jac[0].reshape((self.num_classes,) + shape)
        return jac.reshape((x2d.shape[0], self.num_classes) + shape[1:])

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        sizes = self.layer_sizes
        parts = [MLP_MAGIC, struct.pack("<I", len(self.weights)),
                 struct.pack("<I", len(self.input_shape)),
                 struct.pack(f"<{len(self.input_shape)}I", *self.input_shape),
                 struct.pack(f"<{len(sizes)}I", *sizes)]
        for w, b in zip(self.weights, self.biases):
            parts += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TargetMLP":
        data = Path(path).read_bytes()
        if data[:5] != MLP_MAGIC:
            raise ValueError(f"{path}: not an SMLP1 model")
        pos = 5
        (layers,) = struct.unpack_from("<I", data, pos)
        (rank,) = struct.unpack_from("<I", data, pos + 4)
        pos += 8
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        sizes = struct.unpack_from(f"<{layers + 1}I", data, pos)
        pos += 4 * (layers + 1)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(np.frombuffer(data, "<f8", fan_in * fan_out, pos).reshape(fan_out, fan_in).copy())
            pos += 8 * fan_in * fan_out
            biases.append(np.frombuffer(data, "<f8", fan_out, pos).copy())
            pos += 8 * fan_out
        if pos != len(data):
            raise ValueError(f"{path}: size does not match header")
        return cls(weights, biases, shape)


def train_mlp(dataset, hidden=(128,), cfg: TrainConfig = TrainConfig()) -> TargetMLP:
    """Train a ReLU MLP on raw pixels of a LabeledSet."""
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    model = TargetMLP.initialize(images.shape[1:], hidden, dataset.num_classes, cfg.seed)
    x = images.reshape(images.shape[0], -1)
    rng = np.random.default_rng(cfg.seed + 1)
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(len(x), cfg.batch_size, rng):
            loss, dws, dbs = model.param_gradients(x[idx], labels[idx], cfg.l2_penalty)
            _check_finite(loss, epoch)
            for w, dw, b, db in zip(model.weights, dws, model.biases, dbs):
                w -= cfg.learning_rate * dw
                b -= cfg.learning_rate * db
        loss = model.param_gradients(x, labels, cfg.l2_penalty)[0]
        _check_finite(loss, epoch)
        log.info("mlp epoch %d loss %.6f", epoch, loss)
    return model


# ---------------------------------------------------------------------------
# functional surface


def predict(model, x):
    """(class index, probabilities); ties go to the lowest class index."""
    return model.predict(x)


def input_gradient(model: TargetMLP, x, label) -> np.ndarray:
    return model.input_gradient(x, label)


def class_score_gradients(model: TargetMLP, x) -> np.ndarray:
    return model.class_score_gradients(x)


def evaluate_accuracy(model, inputs, labels=None, batch_size: int = 4096) -> float:
    """Fraction of argmax-correct predictions. ``inputs`` may be a LabeledSet."""
    if labels is None:
        inputs, labels = inputs.images, inputs.labels
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    correct = 0
    for start in range(0, len(labels), batch_size):
        pred, _ = model.predict(inputs[start:start + batch_size])
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / len(labels)
