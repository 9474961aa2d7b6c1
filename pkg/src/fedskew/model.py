"""Dense tanh network with a softmax head and hand-derived gradients.

Loss is the negative log-likelihood, so gradient *descent* lowers it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DataError, EmptyClassError, ShapeError


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Ordered ``(weight[out, in], bias[out])`` pairs. Arrays are read-only."""

    layers: tuple

    def __post_init__(self):
        frozen = []
        prev_out = None
        for W, b in self.layers:
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"bad layer shapes {W.shape}, {b.shape}")
            if prev_out is not None and W.shape[1] != prev_out:
                raise ShapeError(f"layer expects {W.shape[1]} inputs, previous emits {prev_out}")
            prev_out = W.shape[0]
            W.flags.writeable = False
            b.flags.writeable = False
            frozen.append((W, b))
        if not frozen:
            raise ShapeError("a model needs at least one layer")
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @property
    def layer_names(self) -> list[str]:
        return [f"dense{i}" for i in range(len(self.layers))]

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    @classmethod
    def unflatten(cls, vec: np.ndarray, layer_dims: Sequence[int]) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        layers, pos = [], 0
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            W = vec[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = vec[pos:pos + fan_out]
            pos += fan_out
            layers.append((W, b))
        if pos != vec.size:
            raise ShapeError(f"vector of {vec.size} entries does not fit dims {list(layer_dims)}")
        return cls(tuple(layers))

    def _check_same_shape(self, other: "ModelParams") -> None:
        if self.layer_dims != other.layer_dims:
            raise ShapeError(f"shape mismatch: {self.layer_dims} vs {other.layer_dims}")

    def __add__(self, other: "ModelParams") -> "ModelParams":
        self._check_same_shape(other)
        return ModelParams(tuple((W + V, b + c) for (W, b), (V, c) in zip(self.layers, other.layers)))

    def __sub__(self, other: "ModelParams") -> "ModelParams":
        self._check_same_shape(other)
        return ModelParams(tuple((W - V, b - c) for (W, b), (V, c) in zip(self.layers, other.layers)))

    def __mul__(self, scalar: float) -> "ModelParams":
        return ModelParams(tuple((W * scalar, b * scalar) for W, b in self.layers))

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison."""
        return self.layer_dims == other.layer_dims and all(
            np.array_equal(W, V) and np.array_equal(b, c)
            for (W, b), (V, c) in zip(self.layers, other.layers)
        )

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(tuple((np.zeros_like(W), np.zeros_like(b)) for W, b in other.layers))


# Gradients share the parameter layout.
GradientSet = ModelParams


def init_params(layer_dims: Sequence[int], seed: int, scale: float = 1.0) -> ModelParams:
    """Gaussian weights with std ``scale / sqrt(fan_in)``, zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d < 1 for d in dims):
        raise ConfigError(f"layer_dims must be >= 2 positive ints, got {dims}", "model.layer_dims")
    if not scale > 0:
        raise ConfigError("init scale must be positive", "model.init_scale")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = rng.standard_normal((fan_out, fan_in)) * (scale / np.sqrt(fan_in))
        layers.append((W, np.zeros(fan_out)))
    return ModelParams(tuple(layers))


def _logits(params: ModelParams, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    if X.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"input dim {X.shape[1]} != model input dim {params.layer_dims[0]}")
    acts = [X]
    h = X
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = h @ W.T + b
        h = z if i == last else np.tanh(z)
        if i != last:
            acts.append(h)
    return h, acts


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one input vector (or each row of a matrix)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    z, _ = _logits(params, X)
    probs = np.exp(_log_softmax(z))
    return probs[0] if single else probs


def weighted_loss_and_grad(
    params: ModelParams, X: np.ndarray, y: np.ndarray, weights: np.ndarray
) -> tuple[float, GradientSet]:
    """Loss ``sum_n weights[n] * -log f_{y_n}(x_n)`` and its exact gradient."""
    C = params.layer_dims[-1]
    if y.size and (y.min() < 0 or y.max() >= C):
        raise DataError(f"label outside [0, {C})")
    z, acts = _logits(params, X)
    logp = _log_softmax(z)
    rows = np.arange(y.size)
    loss = float(-(weights * logp[rows, y]).sum())

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta *= weights[:, None]
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        a_prev = acts[i]
        grads.append((delta.T @ a_prev, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W) * (1.0 - a_prev * a_prev)
    return loss, ModelParams(tuple(reversed(grads)))


def loss_and_grad(params: ModelParams, batch: LabeledDataset) -> tuple[float, GradientSet]:
    """Mean NLL over the batch and its gradient."""
    n = len(batch)
    if n == 0:
        raise DataError("empty batch")
    return weighted_loss_and_grad(params, batch.features, batch.labels, np.full(n, 1.0 / n))


def class_weights(labels: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Per-example weights giving ``sum_i priors[i] * mean-loss-over-class-i``."""
    counts = np.bincount(labels, minlength=priors.size)
    needed = np.flatnonzero((priors > 0) & (counts == 0))
    if needed.size:
        raise EmptyClassError(f"no examples of class {int(needed[0])}")
    per_class = np.divide(priors, counts, out=np.zeros(priors.size), where=counts > 0)
    return per_class[labels]


def class_conditional_grad(params: ModelParams, data: LabeledDataset, class_i: int) -> GradientSet:
    """Gradient of the mean loss over the examples labelled ``class_i``."""
    mask = data.labels == class_i
    count = int(mask.sum())
    if count == 0:
        raise EmptyClassError(f"no examples of class {class_i}", None)
    weights = np.where(mask, 1.0 / count, 0.0)
    return weighted_loss_and_grad(params, data.features, data.labels, weights)[1]


def prior_weighted_grad(params: ModelParams, data: LabeledDataset, priors) -> GradientSet:
    """``sum_i priors[i] * class_conditional_grad(i)`` in one backward pass."""
    priors = np.asarray(priors, dtype=np.float64)
    weights = class_weights(data.labels, priors)
    return weighted_loss_and_grad(params, data.features, data.labels, weights)[1]


def sgd_step(params: ModelParams, grad: GradientSet, eta: float) -> ModelParams:
    if not eta > 0:
        raise ConfigError("eta must be positive", "eta")
    params._check_same_shape(grad)
    return ModelParams(tuple((W - eta * gW, b - eta * gb) for (W, b), (gW, gb) in zip(params.layers, grad.layers)))


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(forward(params, np.atleast_2d(X)), axis=1)


def evaluate(params: ModelParams, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise DataError("empty test set")
    return float(np.mean(predict(params, test.features) == test.labels))
