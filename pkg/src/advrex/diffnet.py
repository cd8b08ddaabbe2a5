"""Dense ReLU network with hand-written reverse-mode gradients.

Everything is float64. Hidden layers use ReLU (subgradient 0 at 0), the
output layer is affine. Gradients are available with respect to the
parameters and the inputs from a single backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class NetworkParams:
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]  # each (out,)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[1]} does not chain")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "NetworkParams":
        arrays = list(arrays)
        return cls(weights=arrays[0::2], biases=arrays[1::2])

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass
class Batch:
    inputs: np.ndarray  # (n, d) in [0, 1]
    labels: np.ndarray  # (n,) int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must have one entry per input row")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class ForwardTrace:
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # activations[0] is the input
    layer_shapes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]


@dataclass
class Gradients:
    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_grads: np.ndarray

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weight_grads, self.bias_grads):
            out += [w, b]
        return out


def init_network(layer_sizes: Sequence[int], seed: int) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes)}")
    from .rng import stream

    rng = stream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


def _as_inputs(params: NetworkParams, x) -> np.ndarray:
    x = x.inputs if isinstance(x, Batch) else np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match input width {params.layer_sizes[0]}")
    return x


def forward(params: NetworkParams, batch) -> ForwardTrace:
    """Accepts a Batch or a raw (n, d) array."""
    h = _as_inputs(params, batch)
    pre, acts = [], [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
    return ForwardTrace(pre, acts, [w.shape for w in params.weights])


def logits(params: NetworkParams, x) -> np.ndarray:
    return forward(params, x).logits


def predict(params: NetworkParams, x) -> np.ndarray:
    return np.argmax(logits(params, x), axis=1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = np.exp(z - z.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> tuple[np.ndarray, float]:
    """Per-sample losses and their mean."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    per_sample = -log_softmax(logits)[np.arange(len(labels)), labels]
    return per_sample, float(per_sample.mean()) if len(per_sample) else 0.0


def _check_trace(params: NetworkParams, trace: ForwardTrace):
    shapes = [w.shape for w in params.weights]
    if trace.layer_shapes != shapes or len(trace.pre_activations) != len(shapes):
        raise ValueError("trace was not produced by a network with these parameter shapes")


def vjp(params: NetworkParams, trace: ForwardTrace, dlogits: np.ndarray,
        param_grads: bool = True) -> Gradients:
    """Pull a logits cotangent back to parameters and inputs.

    With ``param_grads=False`` only the input gradient is computed and the
    parameter lists are left empty.
    """
    _check_trace(params, trace)
    delta = np.asarray(dlogits, dtype=np.float64)
    if delta.shape != trace.logits.shape:
        raise ValueError(f"cotangent shape {delta.shape} != logits shape {trace.logits.shape}")
    n_layers = len(params.weights)
    wg: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    bg: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        if param_grads:
            wg[i] = delta.T @ trace.activations[i]
            bg[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
        if i > 0:
            delta = delta * (trace.pre_activations[i - 1] > 0.0)
    if not param_grads:
        wg, bg = [], []
    return Gradients(wg, bg, delta)


def loss_cotangent(trace: ForwardTrace, labels, sample_weights=None) -> np.ndarray:
    """d(sum_i w_i * CE_i)/d logits; default weights 1/n give the mean loss."""
    z = trace.logits
    n = z.shape[0]
    labels = _check_labels(labels, n, z.shape[1])
    g = softmax(z)
    g[np.arange(n), labels] -= 1.0
    if sample_weights is None:
        return g / n
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("sample_weights must have one entry per sample")
    return g * w[:, None]


def backward(params: NetworkParams, trace: ForwardTrace, labels, sample_weights=None,
             param_grads: bool = True) -> Gradients:
    """Gradients of the (weighted) cross-entropy for a completed forward pass.

    The default objective is the batch-mean loss. ``sample_weights`` replaces
    the 1/n weights, which lets callers differentiate sums, per-sample maxima
    or REx-weighted mixtures with the same pass.
    """
    _check_trace(params, trace)
    return vjp(params, trace, loss_cotangent(trace, labels, sample_weights), param_grads)


def input_gradient(params: NetworkParams, x: np.ndarray, labels, reduction: str = "sum"
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Input gradient of per-sample losses and the losses themselves.

    With ``reduction="sum"`` row i is the gradient of sample i's own loss,
    independent of what else is in the batch.
    """
    trace = forward(params, x)
    per_sample, _ = cross_entropy(trace.logits, labels)
    n = len(per_sample)
    weights = np.ones(n) if reduction == "sum" else np.full(n, 1.0 / n)
    g = backward(params, trace, labels, weights, param_grads=False)
    return g.input_grads, per_sample


def grad_logit(params: NetworkParams, x, class_index: int) -> np.ndarray:
    """Gradient of a single logit with respect to the input vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= class_index < params.n_classes:
        raise ValueError(f"class_index {class_index} out of range [0, {params.n_classes})")
    trace = forward(params, x.reshape(1, -1))
    seed = np.zeros((1, params.n_classes))
    seed[0, class_index] = 1.0
    return vjp(params, trace, seed, param_grads=False).input_grads[0]


def logit_jacobian(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits (n, C) and their input Jacobian (n, C, d)."""
    trace = forward(params, x)
    n, c = trace.logits.shape
    jac = np.empty((n, c, trace.activations[0].shape[1]))
    for k in range(c):
        seed = np.zeros((n, c))
        seed[:, k] = 1.0
        jac[:, k, :] = vjp(params, trace, seed, param_grads=False).input_grads
    return trace.logits, jac
