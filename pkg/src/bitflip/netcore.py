"""A small feedforward engine with a quantized, attackable output layer.

Only the last layer is stored as two's-complement bits. Hidden layers are
float and frozen; :func:`forward_features` computes their output, which
is the feature vector fed into the quantized layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bitrep import QuantLayer, bits_to_weights, quantize_layer, weight_gradient_vector

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w = _frozen(self.weight)
        b = _frozen(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"bad dense layer shapes {w.shape}, {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        z = h @ self.weight.T + self.bias
        return np.maximum(z, 0.0) if self.activation == "relu" else z


@dataclass(frozen=True)
class Network:
    """Frozen hidden stack plus a quantized output layer (bias kept float)."""

    hidden: tuple[DenseLayer, ...]
    output: QuantLayer
    out_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        hidden = tuple(self.hidden)
        object.__setattr__(self, "hidden", hidden)
        K, C = self.output.shape
        bias = np.zeros(K) if self.out_bias is None else self.out_bias
        bias = _frozen(bias)
        if bias.shape != (K,):
            raise ValueError(f"output bias must have shape ({K},)")
        object.__setattr__(self, "out_bias", bias)
        prev = None
        for i, layer in enumerate(hidden):
            if prev is not None and layer.weight.shape[1] != prev:
                raise ValueError(f"hidden layer {i} expects {layer.weight.shape[1]} inputs, got {prev}")
            prev = layer.weight.shape[0]
        if prev is not None and prev != C:
            raise ValueError(f"output layer has {C} columns but last hidden width is {prev}")

    @property
    def n_classes(self) -> int:
        return self.output.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.output.shape[1]

    @property
    def input_dim(self) -> int:
        return self.hidden[0].weight.shape[1] if self.hidden else self.feature_dim

    @property
    def Q(self) -> int:
        return self.output.Q

    def output_weights(self) -> np.ndarray:
        return self.output.weights()

    def with_output_bits(self, bits: np.ndarray) -> "Network":
        """Copy of this network whose output layer uses ``bits`` (K, C, Q)."""
        return Network(self.hidden, QuantLayer.from_bits(bits, self.output.delta), self.out_bias)


@dataclass(frozen=True)
class TriggerSpec:
    """Blend ``(1 - mask) * x + mask * pattern``; the mask is fixed, the pattern learnable."""

    mask: np.ndarray
    pattern: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mask)
        q = _frozen(self.pattern)
        if m.shape != q.shape or m.ndim != 1:
            raise ValueError("mask and pattern must be 1-D with equal length")
        if np.any((m < 0) | (m > 1)):
            raise ValueError("mask entries must lie in [0, 1]")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "pattern", q)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    role: str = "train"
    input_range: tuple[float, float] = field(default=(-np.inf, np.inf))

    def __post_init__(self):
        X = _frozen(np.atleast_2d(self.X))
        y = _frozen(self.y, dtype=np.int64)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different lengths")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(X)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, role: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.n_classes, role or self.role, self.input_range)


# ----------------------------------------------------------------- forward


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {net.input_dim}")
    return x


def forward_features(net: Network, x: np.ndarray) -> np.ndarray:
    """Last-hidden-layer features; accepts a single vector or a (N, d) batch."""
    h = _check_input(net, x)
    for layer in net.hidden:
        h = layer(h)
    return h


def logits(net: Network, x: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Class logits, optionally with substitute (K, C) output weights."""
    W = net.output_weights() if weights is None else weights
    return forward_features(net, x) @ W.T + net.out_bias


def predict(net: Network, x: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    # argmax ties resolve to the lowest class index
    return np.argmax(logits(net, x, weights), axis=-1)


def accuracy(net: Network, data: Dataset, weights: Optional[np.ndarray] = None) -> float:
    """Clean accuracy in percent."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    return 100.0 * float(np.mean(predict(net, data.X, weights) == data.y))


def class_logit(
    net: Network,
    x: np.ndarray,
    row: int,
    override_bits: Optional[np.ndarray] = None,
) -> float:
    """Logit of class ``row``; ``override_bits`` is a relaxed (C*Q,) LSB-first slice."""
    K, C = net.output.shape
    if not 0 <= row < K:
        raise ValueError(f"row {row} out of range for {K} classes")
    g = forward_features(net, x)
    if override_bits is None:
        w = net.output_weights()[row]
    else:
        ob = np.asarray(override_bits, dtype=np.float64)
        if ob.shape != (C * net.Q,):
            raise ValueError(f"override slice must have length {C * net.Q}")
        w = bits_to_weights(ob.reshape(C, net.Q), net.output.delta)
    return float(g @ w + net.out_bias[row])


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits_: np.ndarray, label: int) -> float:
    return float(-log_softmax(logits_)[..., label])


def apply_trigger(x: np.ndarray, trig: TriggerSpec, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Stamp the trigger onto ``x`` (single or batch) and clamp to ``[lo, hi]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trig.mask.shape[0]:
        raise ValueError("trigger length does not match input dimension")
    return np.clip((1.0 - trig.mask) * x + trig.mask * trig.pattern, lo, hi)


# --------------------------------------------------------------- gradients


def grad_logit_wrt_bits(net: Network, x: np.ndarray, row: int) -> np.ndarray:
    """d logit_row / d bits of that row, flattened (C*Q,), LSB first per weight."""
    if not 0 <= row < net.n_classes:
        raise ValueError(f"row {row} out of range")
    g = forward_features(net, x)
    if g.ndim != 1:
        raise ValueError("expected a single input vector")
    return np.outer(g, weight_gradient_vector(net.Q, net.output.delta)).reshape(-1)


def grad_loss_wrt_input(
    net: Network,
    x: np.ndarray,
    label,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of the cross entropy w.r.t. the input, by reverse-mode chain rule.

    With a batch ``x`` of shape (N, d) and labels of shape (N,), returns the
    per-sample gradients (N, d) of the per-sample losses.
    """
    x = _check_input(net, x)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if y.shape[0] != X.shape[0]:
        y = np.broadcast_to(y, (X.shape[0],))
    W = net.output_weights() if weights is None else weights

    acts = [X]
    pre = []
    h = X
    for layer in net.hidden:
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    out = h @ W.T + net.out_bias
    delta = softmax(out)
    delta[np.arange(X.shape[0]), y] -= 1.0
    grad = delta @ W
    for layer, z in zip(reversed(net.hidden), reversed(pre)):
        if layer.activation == "relu":
            grad = grad * (z > 0)
        grad = grad @ layer.weight
    return grad[0] if single else grad


# ----------------------------------------------------------------- training


def init_network_params(widths: Sequence[int], rng: np.random.Generator, out_scale: float = 0.01):
    """He-initialised hidden layers; small output layer so untrained loss is near ln K."""
    params = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        std = out_scale if last else np.sqrt(2.0 / n_in)
        params.append([rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out)])
    return params


def _mlp_forward(params, X):
    acts = [X]
    h = X
    for i, (W, b) in enumerate(params):
        z = h @ W.T + b
        h = z if i == len(params) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def _mlp_loss_grad(params, X, y):
    acts = _mlp_forward(params, X)
    out = acts[-1]
    lsm = log_softmax(out)
    n = X.shape[0]
    loss = -float(np.mean(lsm[np.arange(n), y]))
    delta = np.exp(lsm)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = (delta @ W) * (acts[i] > 0)
    return loss, grads


def train_float_mlp(
    data: Dataset,
    hidden_widths: Sequence[int],
    epochs: int = 200,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    momentum: float = 0.9,
):
    """Minibatch SGD with momentum on the summed-then-averaged cross entropy.

    Returns the list of float ``[W, b]`` pairs (output layer last).
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    widths = [data.input_dim, *hidden_widths, data.n_classes]
    params = init_network_params(widths, rng)
    vel = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = _mlp_loss_grad(params, data.X[idx], data.y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            for (p, v, g) in zip(params, vel, grads):
                for j in range(2):
                    v[j] *= momentum
                    v[j] -= lr * g[j]
                    p[j] += v[j]
        if log.isEnabledFor(logging.DEBUG) and (epoch + 1) % 50 == 0:
            full, _ = _mlp_loss_grad(params, data.X, data.y)
            log.debug("epoch %d loss %.4f", epoch + 1, full)
    return params


def build_network(params, Q: int) -> Network:
    """Freeze float parameters and quantize the last layer to ``Q`` bits."""
    hidden = tuple(DenseLayer(W, b, "relu") for W, b in params[:-1])
    W_out, b_out = params[-1]
    return Network(hidden, quantize_layer(W_out, Q), b_out)


def train_model(
    data: Dataset,
    hidden_widths: Sequence[int] = (32, 32, 32),
    epochs: int = 30,
    lr: float = 0.01,
    seed: int = 0,
    Q: int = 8,
    batch_size: int = 32,
    momentum: float = 0.9,
) -> Network:
    """Train a ReLU MLP in float, then post-training-quantize its output layer."""
    params = train_float_mlp(data, hidden_widths, epochs, lr, seed, batch_size, momentum)
    return build_network(params, Q)
