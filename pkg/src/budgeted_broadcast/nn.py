"""Minimal masked MLP with manual backprop and plain SGD.

Weights are stored ``(fan_in, fan_out)`` so that ``y = x @ W``. Row ``i`` of a
layer's matrix holds the outgoing edges of source unit ``i`` (its fan-out) and
column ``j`` holds the incoming edges of target unit ``j`` (its fan-in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

from .errors import ConfigError, NumericalError, ShapeError


@dataclass
class MaskedLayer:
    weights: np.ndarray
    mask: np.ndarray
    bias: np.ndarray
    rescale: np.ndarray

    @classmethod
    def dense(cls, weights: np.ndarray, bias: np.ndarray | None = None) -> "MaskedLayer":
        weights = np.asarray(weights, dtype=np.float64)
        n_out = weights.shape[1]
        return cls(
            weights=weights,
            mask=np.ones_like(weights),
            bias=np.zeros(n_out) if bias is None else np.asarray(bias, dtype=np.float64),
            rescale=np.ones(n_out),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def effective(self) -> np.ndarray:
        return self.weights * self.mask * self.rescale

    def fan_out(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)

    def fan_in(self) -> np.ndarray:
        return self.mask.sum(axis=0).astype(np.int64)

    def copy(self) -> "MaskedLayer":
        return MaskedLayer(
            self.weights.copy(), self.mask.copy(), self.bias.copy(), self.rescale.copy()
        )


@dataclass
class Network:
    layers: list[MaskedLayer]
    step: int = 0  # number of SGD updates applied so far

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"layer widths disagree: {a.shape} then {b.shape}")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].shape[0]] + [layer.shape[1] for layer in self.layers]

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers], self.step)

    def density(self, layer_ids=None) -> float:
        ids = range(len(self.layers)) if layer_ids is None else layer_ids
        active = sum(self.layers[i].mask.sum() for i in ids)
        total = sum(self.layers[i].mask.size for i in ids)
        return float(active / total)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.targets):
            raise ShapeError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree"
            )

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])


def init_network(layer_sizes, seed: int, init_scale: float = 1.0) -> Network:
    """He-initialised dense network; ``init_scale`` multiplies the He std."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ConfigError(f"need at least two positive layer sizes, got {sizes}", "layer_sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * init_scale * np.sqrt(2.0 / fan_in)
        layers.append(MaskedLayer.dense(w))
    return Network(layers)


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layers[0].shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match input width {net.layers[0].shape[0]}")
    return x


def _forward_full(net: Network, x: np.ndarray):
    pre, post = [], [x]
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = h @ layer.effective() + layer.bias
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        post.append(h)
    return pre, post


def forward(net: Network, batch) -> list[np.ndarray]:
    """Return ``[input, hidden_1, ..., hidden_L, output_probability]``.

    Hidden entries are post-rectifier activations; the last entry is the
    logistic output.
    """
    x = batch.inputs if isinstance(batch, Batch) else batch
    _, post = _forward_full(net, _check_input(net, x))
    post[-1] = sigmoid(post[-1])
    return post


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - targets * logits))


def loss(net: Network, batch: Batch) -> float:
    pre, _ = _forward_full(net, _check_input(net, batch.inputs))
    return bce_with_logits(pre[-1], batch.targets)


def loss_and_grads(net: Network, batch: Batch):
    """Mean BCE loss and ``[(dW, db), ...]`` with respect to the raw weights.

    Masked-out entries get an exactly zero gradient.
    """
    pre, post = _forward_full(net, _check_input(net, batch.inputs))
    targets = batch.targets
    value = bce_with_logits(pre[-1], targets)
    delta = (sigmoid(pre[-1]) - targets) / targets.size
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g_eff = post[i].T @ delta
        grads[i] = (g_eff * layer.mask * layer.rescale, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ layer.effective().T) * (pre[i - 1] > 0)
    return value, grads


def train_step(net: Network, batch: Batch, lr: float, layer_lr=None) -> float:
    """One SGD step in place. Returns the loss measured before the update.

    ``layer_lr`` optionally scales the step per layer; small hidden-layer
    factors give the lazy regime where features stay near initialisation.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}", "lr")
    scales = [1.0] * len(net.layers) if layer_lr is None else list(layer_lr)
    if len(scales) != len(net.layers) or any(s < 0 for s in scales):
        raise ConfigError("need one non-negative factor per layer", "layer_lr")
    value, grads = loss_and_grads(net, batch)
    if not np.isfinite(value):
        raise NumericalError(net.step, value)
    for layer, (dw, db), scale in zip(net.layers, grads, scales):
        layer.weights -= lr * scale * dw
        layer.bias -= lr * scale * db
    net.step += 1
    return value


def predict(net: Network, batch, threshold: float = 0.5) -> np.ndarray:
    # ties at the threshold go to class 0
    return (forward(net, batch)[-1] > threshold).astype(np.float64)


def evaluate_accuracy(net: Network, batch: Batch, threshold: float = 0.5) -> float:
    if len(batch) == 0:
        return float("nan")
    hits = np.all(predict(net, batch, threshold) == batch.targets, axis=1)
    return float(hits.mean())
