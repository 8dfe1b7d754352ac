"""Dense ReLU/softmax network operating on flat parameter vectors.

Parameters are packed layer by layer as ``W (n_in x n_out, row-major)``
followed by ``b (n_out)``. Everything outside this module treats a model as a
plain 1-D float64 array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: Tuple[int, ...]
    init_seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a model needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in self._pairs())

    def _pairs(self):
        return zip(self.layer_sizes[:-1], self.layer_sizes[1:])


@dataclass
class GradientResult:
    gradient: np.ndarray
    loss: float


def unpack(spec: ModelSpec, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views, one pair per layer."""
    theta = np.asarray(theta)
    if theta.ndim != 1 or theta.shape[0] != spec.num_params:
        raise ValueError(
            f"parameter vector has shape {theta.shape}, expected ({spec.num_params},)"
        )
    layers = []
    offset = 0
    for n_in, n_out in spec._pairs():
        w = theta[offset:offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = theta[offset:offset + n_out]
        offset += n_out
        layers.append((w, b))
    return layers


def weight_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask selecting weight entries (biases excluded)."""
    mask = np.zeros(spec.num_params, dtype=bool)
    offset = 0
    for n_in, n_out in spec._pairs():
        mask[offset:offset + n_in * n_out] = True
        offset += (n_in + 1) * n_out
    return mask


def init_model(spec: ModelSpec) -> np.ndarray:
    """Glorot-uniform weights, zero biases, drawn from ``spec.init_seed``."""
    rng = np.random.default_rng(spec.init_seed)
    theta = np.zeros(spec.num_params, dtype=np.float64)
    for w, _ in unpack(spec, theta):
        n_in, n_out = w.shape
        limit = np.sqrt(6.0 / (n_in + n_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return theta


def _check_batch(spec: ModelSpec, features: np.ndarray, labels: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValueError(
            f"features have shape {features.shape}, expected (*, {spec.input_dim})"
        )
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must be a vector with one entry per example")
    if features.shape[0] == 0:
        raise ValueError("batch is empty")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError("label out of range")
    return features, labels.astype(np.int64)


def _forward(layers, features):
    activations = [features]
    h = features
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        activations.append(h)
    w, b = layers[-1]
    logits = h @ w + b
    return activations, logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_proba(spec: ModelSpec, theta: np.ndarray, features: np.ndarray) -> np.ndarray:
    layers = unpack(spec, theta)
    _, logits = _forward(layers, np.asarray(features, dtype=np.float64))
    return np.exp(log_softmax(logits))


def loss_and_grad(
    spec: ModelSpec,
    theta: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 0.0,
) -> GradientResult:
    """Mean softmax cross-entropy plus ``l2/2 * ||weights||^2`` and its gradient."""
    features, labels = _check_batch(spec, features, labels)
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    layers = unpack(spec, theta)
    activations, logits = _forward(layers, features)
    m = features.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(m)
    loss = -logp[rows, labels].mean()

    grad = np.zeros_like(theta, dtype=np.float64)
    grad_layers = unpack(spec, grad)
    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta /= m
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        gw, gb = grad_layers[idx]
        gw[...] = activations[idx].T @ delta
        gb[...] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ w.T) * (activations[idx] > 0)

    if l2 > 0:
        for (w, _), (gw, _) in zip(layers, grad_layers):
            flat = w.ravel()
            loss += 0.5 * l2 * float(flat @ flat)
            gw += l2 * w
    return GradientResult(gradient=grad, loss=float(loss))


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ValueError(f"length mismatch: {theta.shape} vs {grad.shape}")
    return theta - lr * grad


def evaluate(
    spec: ModelSpec,
    theta: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    chunk: int = 4096,
) -> float:
    """Top-1 accuracy of ``theta`` on a labelled set."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] == 0:
        raise ValueError("test set is empty")
    layers = unpack(spec, theta)
    correct = 0
    for start in range(0, features.shape[0], chunk):
        _, logits = _forward(layers, features[start:start + chunk])
        correct += int((logits.argmax(axis=1) == labels[start:start + chunk]).sum())
    return correct / features.shape[0]


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int, init_seed: int = 0) -> ModelSpec:
    return ModelSpec((input_dim, *hidden, num_classes), init_seed)
