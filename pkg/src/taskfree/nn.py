"""Small fully connected ReLU network with hand-written backprop.

All parameters live in one flat float64 vector. Per layer the weight matrix
(shape ``(out, in)``, row-major) comes first, then the bias vector. Layer
views are reshaped slices of that vector, so flattening is free.

Batches are ``(X, y)`` pairs. For cross-entropy ``X`` has shape ``(B, d)`` and
``y`` holds integer class labels. For the triplet loss ``X`` has shape
``(B, 3, d)`` (anchor, positive, negative) and ``y`` is an identity tag that
the loss ignores.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError

CROSS_ENTROPY = "cross-entropy"
TRIPLET = "triplet-margin"


@dataclass(frozen=True)
class LossSpec:
    kind: str = CROSS_ENTROPY
    margin: float = 1.0

    def __post_init__(self):
        if self.kind not in (CROSS_ENTROPY, TRIPLET):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind == TRIPLET and not self.margin > 0:
            raise ConfigError("triplet margin must be positive")


class Model:
    """MLP with ReLU hidden layers and a linear output layer."""

    def __init__(self, layer_sizes: Sequence[int], params: np.ndarray | None = None):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"layer sizes must be >= 2 positive ints, got {layer_sizes!r}")
        self.layer_sizes = sizes
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w_end = offset + fan_in * fan_out
            self._slices.append((offset, w_end, w_end + fan_out))
            offset = w_end + fan_out
        self.n_params = offset
        if params is None:
            self.params = np.zeros(offset)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (offset,):
                raise InputError(f"expected {offset} parameters, got shape {params.shape}")
            self.params = params.copy()

    @classmethod
    def init(cls, layer_sizes: Sequence[int], seed) -> "Model":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        model = cls(layer_sizes)
        for (fan_in, fan_out), (w, _b) in zip(zip(model.layer_sizes[:-1], model.layer_sizes[1:]), model.layers()):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = rng.uniform(-a, a, size=w.shape)
        return model

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for (start, w_end, b_end), fan_in, fan_out in zip(
            self._slices, self.layer_sizes[:-1], self.layer_sizes[1:]
        ):
            out.append((self.params[start:w_end].reshape(fan_out, fan_in), self.params[w_end:b_end]))
        return out

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    @classmethod
    def unflatten(cls, layer_sizes: Sequence[int], flat: np.ndarray) -> "Model":
        return cls(layer_sizes, flat)

    def copy(self) -> "Model":
        return Model(self.layer_sizes, self.params)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def __repr__(self):
        return f"Model(layer_sizes={self.layer_sizes}, n_params={self.n_params})"


def _as_rows(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InputError(f"expected input dim {model.input_dim}, got shape {x.shape}")
    return x


def _forward_cache(model: Model, X: np.ndarray):
    """Return (activations, pre-activations); activations[0] is the input."""
    acts = [X]
    pre = []
    layers = model.layers()
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(layers) - 1 else z)
    return acts, pre


def forward(model: Model, x) -> np.ndarray:
    """Evaluate the network on one input vector or a ``(B, d)`` batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    acts, _ = _forward_cache(model, _as_rows(model, x))
    return acts[-1][0] if single else acts[-1]


def _deltas(model: Model, acts, pre, dout: np.ndarray):
    """Yield (layer index, delta at that layer's pre-activation) from the top down."""
    layers = model.layers()
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        yield i, delta
        if i > 0:
            delta = (delta @ layers[i][0]) * (pre[i - 1] > 0)


def _backward(model: Model, acts, pre, dout: np.ndarray) -> np.ndarray:
    """Gradient of sum(dout * output) w.r.t. the flat parameters."""
    grad = np.empty(model.n_params)
    for i, delta in _deltas(model, acts, pre, dout):
        start, w_end, b_end = model._slices[i]
        grad[start:w_end] = (delta.T @ acts[i]).ravel()
        grad[w_end:b_end] = delta.sum(axis=0)
    return grad


def per_sample_grads(model: Model, X, dout: np.ndarray) -> np.ndarray:
    """Row k is the gradient of ``dout[k] . F(X[k])``; shape ``(B, n_params)``."""
    X = _as_rows(model, X)
    acts, pre = _forward_cache(model, X)
    grads = np.empty((X.shape[0], model.n_params))
    for i, delta in _deltas(model, acts, pre, dout):
        start, w_end, b_end = model._slices[i]
        grads[:, start:w_end] = (delta[:, :, None] * acts[i][:, None, :]).reshape(X.shape[0], -1)
        grads[:, w_end:b_end] = delta
    return grads


def _check_batch(model: Model, batch, spec: LossSpec):
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise InputError("empty batch")
    if spec.kind == CROSS_ENTROPY:
        if X.ndim != 2 or X.shape[1] != model.input_dim:
            raise InputError(f"expected inputs of shape (B, {model.input_dim}), got {X.shape}")
        y = y.astype(np.int64)
        if y.shape != (X.shape[0],) or y.min() < 0 or y.max() >= model.output_dim:
            raise InputError("labels must be class indices in [0, output_dim)")
    else:
        if X.ndim != 3 or X.shape[1] != 3 or X.shape[2] != model.input_dim:
            raise InputError(f"expected triplets of shape (B, 3, {model.input_dim}), got {X.shape}")
    return X, y


def _ce_terms(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    losses = log_z - shifted[np.arange(len(y)), y]
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(len(y)), y] -= 1.0
    return losses, probs


def _triplet_terms(emb: np.ndarray, margin: float):
    a, p, n = emb[:, 0], emb[:, 1], emb[:, 2]
    hinge = ((a - p) ** 2).sum(axis=1) - ((a - n) ** 2).sum(axis=1) + margin
    losses = np.maximum(hinge, 0.0)
    active = (hinge > 0)[:, None]
    demb = np.stack([2.0 * (n - p), -2.0 * (a - p), 2.0 * (a - n)], axis=1) * active[:, None]
    return losses, demb


def per_sample_loss(model: Model, batch, spec: LossSpec) -> np.ndarray:
    X, y = _check_batch(model, batch, spec)
    if spec.kind == CROSS_ENTROPY:
        return _ce_terms(forward(model, X), y)[0]
    B = X.shape[0]
    emb = forward(model, X.reshape(3 * B, -1)).reshape(B, 3, -1)
    return _triplet_terms(emb, spec.margin)[0]


def loss_and_grad(model: Model, batch, spec: LossSpec) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its exact gradient."""
    X, y = _check_batch(model, batch, spec)
    B = X.shape[0]
    if spec.kind == CROSS_ENTROPY:
        acts, pre = _forward_cache(model, X)
        losses, dlogits = _ce_terms(acts[-1], y)
        return float(losses.mean()), _backward(model, acts, pre, dlogits / B)
    flat = X.reshape(3 * B, -1)
    acts, pre = _forward_cache(model, flat)
    losses, demb = _triplet_terms(acts[-1].reshape(B, 3, -1), spec.margin)
    return float(losses.mean()), _backward(model, acts, pre, demb.reshape(3 * B, -1) / B)


def sgd_step(model: Model, grad: np.ndarray, lr: float) -> Model:
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (model.n_params,):
        raise InputError(f"gradient shape {grad.shape} does not match {model.n_params} parameters")
    return Model(model.layer_sizes, model.params - lr * grad)


def central_difference(fn: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    if not 1e-8 <= eps <= 1e-3:
        raise ConfigError("eps must lie in [1e-8, 1e-3]")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        hi = theta.copy()
        lo = theta.copy()
        hi[i] += eps
        lo[i] -= eps
        grad[i] = (fn(hi) - fn(lo)) / (2.0 * eps)
    return grad


def finite_diff_grad(model: Model, batch, spec: LossSpec, eps: float = 1e-5) -> np.ndarray:
    """Test oracle: central differences of the batch-mean loss."""

    def fn(theta):
        return float(per_sample_loss(Model(model.layer_sizes, theta), batch, spec).mean())

    return central_difference(fn, model.params, eps)
