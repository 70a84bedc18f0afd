"""Two-layer dense classifier written directly in numpy.

Inputs are 1344 pooled range-azimuth features, the hidden layer has 18 ReLU
units and the output is a 6-way softmax. Everything here is a pure function
of its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

N_FEATURES = 1344
N_HIDDEN = 18
N_CLASSES = 6
N_PARAMS = N_FEATURES * N_HIDDEN + N_HIDDEN + N_HIDDEN * N_CLASSES + N_CLASSES

LAYER_NAMES = ("layer1_weights", "layer1_bias", "layer2_weights", "layer2_bias")
LAYER_SHAPES = ((N_FEATURES, N_HIDDEN), (N_HIDDEN,), (N_HIDDEN, N_CLASSES), (N_CLASSES,))

assert N_PARAMS == 24324


@dataclass
class Model:
    """Weights and biases of the classifier.

    The same container is used for gradients (see :data:`Gradients`).
    """

    layer1_weights: np.ndarray
    layer1_bias: np.ndarray
    layer2_weights: np.ndarray
    layer2_bias: np.ndarray

    def __post_init__(self):
        for f, shape in zip(fields(self), LAYER_SHAPES):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{f.name}: expected shape {shape}, got {arr.shape}")
            setattr(self, f.name, arr)
        assert self.n_params == N_PARAMS

    @classmethod
    def zeros(cls) -> "Model":
        return cls(*(np.zeros(s) for s in LAYER_SHAPES))

    @classmethod
    def full(cls, value: float) -> "Model":
        return cls(*(np.full(s, float(value)) for s in LAYER_SHAPES))

    @property
    def layers(self) -> tuple[np.ndarray, ...]:
        return (self.layer1_weights, self.layer1_bias, self.layer2_weights, self.layer2_bias)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.layers)

    def copy(self) -> "Model":
        return Model(*(a.copy() for a in self.layers))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.layers])

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> "Model":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} values, got shape {vec.shape}")
        out, start = [], 0
        for shape in LAYER_SHAPES:
            size = int(np.prod(shape))
            out.append(vec[start:start + size].reshape(shape).copy())
            start += size
        return cls(*out)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.layers)


Gradients = Model


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.atleast_1d(np.asarray(self.labels)).astype(np.int64)
        if self.features.shape[0] < 1:
            raise ValueError("batch is empty")
        if self.features.shape != (self.labels.shape[0], N_FEATURES):
            raise ValueError(
                f"features {self.features.shape} do not match labels {self.labels.shape}"
            )
        if self.labels.min() < 0 or self.labels.max() >= N_CLASSES:
            raise ValueError("labels must lie in 0..5")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")

    def __len__(self) -> int:
        return self.labels.shape[0]


def init_model(seed: int) -> Model:
    """Uniform fan-in scaled weights, zero biases."""
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(N_FEATURES)
    lim2 = 1.0 / np.sqrt(N_HIDDEN)
    return Model(
        rng.uniform(-lim1, lim1, size=LAYER_SHAPES[0]),
        np.zeros(N_HIDDEN),
        rng.uniform(-lim2, lim2, size=LAYER_SHAPES[2]),
        np.zeros(N_CLASSES),
    )


def _logits(m: Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pre = x @ m.layer1_weights + m.layer1_bias
    hidden = np.maximum(pre, 0.0)
    return pre, hidden, hidden @ m.layer2_weights + m.layer2_bias


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(m: Model, features: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature vector (or a matrix of them)."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} features, got {x.shape[-1]}")
    if not np.isfinite(x).all():
        raise ValueError("features contain NaN or Inf")
    _, _, z = _logits(m, x)
    return np.exp(_log_softmax(z))


def per_sample_loss(m: Model, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    _, _, z = _logits(m, x)
    return -_log_softmax(z)[np.arange(y.shape[0]), y]


def loss_and_grad(m: Model, b: Batch) -> tuple[float, Gradients]:
    """Mean cross-entropy over the batch and its exact gradient."""
    x, y = b.features, b.labels
    n = y.shape[0]
    pre, hidden, z = _logits(m, x)
    logp = _log_softmax(z)
    loss = float(-logp[np.arange(n), y].mean())

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    dhidden = (dz @ m.layer2_weights.T) * (pre > 0)
    grads = Model(
        x.T @ dhidden,
        dhidden.sum(axis=0),
        hidden.T @ dz,
        dz.sum(axis=0),
    )
    return loss, grads


def sgd_step(m: Model, g: Gradients, mu: float) -> Model:
    if mu <= 0:
        raise ValueError("step size must be positive")
    for a, b in zip(m.layers, g.layers):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return Model(*(p - mu * dp for p, dp in zip(m.layers, g.layers)))


def eval_loss(m: Model, dataset) -> float:
    """Mean cross-entropy over every sample of ``dataset``.

    ``dataset`` is anything exposing ``features`` and ``labels``.
    """
    labels = np.asarray(dataset.labels)
    if labels.size == 0:
        raise ValueError("dataset is empty")
    return float(per_sample_loss(m, dataset.features, labels).mean())
