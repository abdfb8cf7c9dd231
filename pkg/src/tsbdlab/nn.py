"""Dense feed-forward networks with manual backpropagation and SGD.

Parameters are float32 by convention (checkpoints store float32); every
operation follows the dtype of the network it is given, so numerical tests
can run the same code in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError

CHECKPOINT_MAGIC = b"TSBD"
CHECKPOINT_VERSION = 1


class Activation(Enum):
    RELU = 0
    IDENTITY = 1


class Direction(Enum):
    DESCEND = "descend"
    ASCEND = "ascend"


@dataclass
class Layer:
    """One dense layer: a (neurons x fan_in) weight matrix plus biases.

    Each weight row holds the subweights of one neuron.
    """

    weights: np.ndarray
    biases: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.biases = np.asarray(self.biases)
        if self.weights.ndim != 2:
            raise DimensionError("layer weights must be 2-D (neurons x fan_in)")
        if self.biases.ndim != 1 or self.biases.shape[0] != self.weights.shape[0]:
            raise DimensionError("bias length must equal the neuron count")
        if not np.issubdtype(self.weights.dtype, np.floating):
            raise DomainError("layer parameters must be floating point")
        if self.biases.dtype != self.weights.dtype:
            self.biases = self.biases.astype(self.weights.dtype)
        if not isinstance(self.activation, Activation):
            raise DomainError(f"unknown activation {self.activation!r}")

    @property
    def neurons(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class Network:
    """Ordered dense layers; the final layer emits logits (Identity)."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.fan_in != prev.neurons:
                raise DimensionError(
                    f"layer chain broken: fan_in {cur.fan_in} after "
                    f"{prev.neurons}-neuron layer"
                )
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise DomainError("final layer must be Identity (logits)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def num_classes(self) -> int:
        return self.layers[-1].neurons

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_indices(self) -> range:
        """Indices of non-output layers (reinit/profiling candidates)."""
        return range(len(self.layers) - 1)

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weights.dtype

    def num_params(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def copy(self) -> "Network":
        return Network(
            [Layer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        )

    def astype(self, dtype) -> "Network":
        return Network(
            [
                Layer(l.weights.astype(dtype), l.biases.astype(dtype), l.activation)
                for l in self.layers
            ]
        )


@dataclass
class Batch:
    """A block of input rows with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels)
        if self.inputs.ndim != 2:
            raise DimensionError("batch inputs must be 2-D (samples x features)")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DimensionError("labels length must equal the sample count")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DomainError("labels must be integers")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Gradients:
    """Per-layer weight/bias gradients, shape-congruent with a Network."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionError("weight/bias gradient lists differ in length")


def _require_congruent(net: Network, grads: Gradients):
    if len(grads.weights) != net.num_layers:
        raise DimensionError("gradient layer count does not match the network")
    for layer, gw, gb in zip(net.layers, grads.weights, grads.biases):
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise DimensionError("gradient shapes do not match the network")


def _forward_raw(net: Network, inputs: np.ndarray) -> list[np.ndarray]:
    x = np.asarray(inputs)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(
            f"input width {x.shape[-1] if x.ndim else '?'} does not match "
            f"network fan-in {net.input_dim}"
        )
    h = x.astype(net.dtype, copy=False)
    activations = []
    for layer in net.layers:
        z = h @ layer.weights.T + layer.biases
        h = np.maximum(z, 0) if layer.activation is Activation.RELU else z
        activations.append(h)
    return activations


def forward(net: Network, batch: Batch) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the network; returns (per-layer post-activations, logits)."""
    activations = _forward_raw(net, batch.inputs)
    return activations, activations[-1]


def predict(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    logits = _forward_raw(net, inputs)[-1]
    return np.argmax(logits, axis=1)


def _check_labels(labels: np.ndarray, num_classes: int):
    if labels.size == 0:
        raise DomainError("empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"label out of range for {num_classes} classes")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Max subtraction guards against overflow without changing the value.
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise DimensionError("logit rows must equal the label count")
    _check_labels(labels, logits.shape[1])
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean(dtype=np.float64))


def backward(net: Network, batch: Batch) -> tuple[Gradients, float]:
    """Analytic gradient of the mean cross-entropy over the batch."""
    x = np.asarray(batch.inputs)
    labels = np.asarray(batch.labels)
    _check_labels(labels, net.num_classes)

    pre = []
    post = [x.astype(net.dtype, copy=False)]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(
            f"input width does not match network fan-in {net.input_dim}"
        )
    h = post[0]
    for layer in net.layers:
        z = h @ layer.weights.T + layer.biases
        pre.append(z)
        h = np.maximum(z, 0) if layer.activation is Activation.RELU else z
        post.append(h)

    logits = post[-1]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(len(labels)), labels].mean(dtype=np.float64))

    n = len(labels)
    delta = np.exp(logp)
    delta[np.arange(n), labels] -= 1
    delta /= n

    g_weights: list[np.ndarray] = [None] * net.num_layers
    g_biases: list[np.ndarray] = [None] * net.num_layers
    for l in reversed(range(net.num_layers)):
        layer = net.layers[l]
        if layer.activation is Activation.RELU:
            delta = delta * (pre[l] > 0)
        g_weights[l] = delta.T @ post[l]
        g_biases[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ layer.weights
    return Gradients(g_weights, g_biases), loss


def sgd_step(
    net: Network,
    grads: Gradients,
    lr: float,
    direction: Direction = Direction.DESCEND,
) -> Network:
    """One SGD update; Descend subtracts lr*g, Ascend adds it."""
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    _require_congruent(net, grads)
    sign = -lr if direction is Direction.DESCEND else lr
    layers = [
        Layer(l.weights + sign * gw, l.biases + sign * gb, l.activation)
        for l, gw, gb in zip(net.layers, grads.weights, grads.biases)
    ]
    return Network(layers)


def flatten_params(net: Network) -> np.ndarray:
    """All parameters as one vector: per layer, weights row-major then biases."""
    return np.concatenate(
        [a for l in net.layers for a in (l.weights.ravel(), l.biases)]
    )


def with_params(net: Network, flat: np.ndarray) -> Network:
    """A network shaped like `net` with parameter values taken from `flat`."""
    flat = np.asarray(flat)
    if flat.shape != (net.num_params(),):
        raise DimensionError("flat parameter vector has the wrong length")
    layers = []
    ofs = 0
    for l in net.layers:
        wn = l.weights.size
        w = flat[ofs : ofs + wn].reshape(l.weights.shape)
        ofs += wn
        b = flat[ofs : ofs + l.biases.size]
        ofs += l.biases.size
        layers.append(Layer(w.copy(), b.copy(), l.activation))
    return Network(layers)


def save_checkpoint(net: Network, path) -> None:
    """Write the binary checkpoint format (little-endian, float32)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, net.num_layers)]
    for layer in net.layers:
        parts.append(
            struct.pack("<IIB", layer.neurons, layer.fan_in, layer.activation.value)
        )
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Network:
    """Read a checkpoint written by save_checkpoint; validates the format."""
    data = Path(path).read_bytes()
    cur = 0

    def take(n: int, what: str) -> bytes:
        nonlocal cur
        if cur + n > len(data):
            raise FormatError(f"truncated checkpoint: ran out of bytes in {what}")
        out = data[cur : cur + n]
        cur += n
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic bytes (not a checkpoint file)")
    version, n_layers = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for i in range(n_layers):
        rows, cols, tag = struct.unpack("<IIB", take(9, f"layer {i} header"))
        try:
            act = Activation(tag)
        except ValueError:
            raise FormatError(f"unknown activation tag {tag} in layer {i}") from None
        w = np.frombuffer(take(4 * rows * cols, f"layer {i} weights"), dtype="<f4")
        b = np.frombuffer(take(4 * rows, f"layer {i} biases"), dtype="<f4")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise FormatError(f"non-finite parameter in layer {i}")
        layers.append(Layer(w.reshape(rows, cols).copy(), b.copy(), act))
    if cur != len(data):
        raise FormatError(f"{len(data) - cur} trailing bytes after last layer")
    try:
        return Network(layers)
    except (DimensionError, DomainError) as exc:
        raise FormatError(f"inconsistent checkpoint contents: {exc}") from exc
