"""Attacker-side training: seeded init and plain mini-batch SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledSet
from .errors import DivergenceError, DomainError
from .nn import Activation, Direction, Layer, Network, backward, sgd_step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch size must be >= 1")
        if self.lr < 0:
            raise DomainError("learning rate must be non-negative")


def iter_batches(order: np.ndarray, batch_size: int):
    """Yield consecutive index blocks; the tail block may be short."""
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def init_network(seed: int, layer_sizes) -> Network:
    """Glorot-uniform weights, zero biases, ReLU hidden layers, Identity out."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DomainError("layer sizes must be >= 1 with at least input and output")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)
        b = np.zeros(fan_out, dtype=np.float32)
        act = Activation.IDENTITY if i == len(sizes) - 2 else Activation.RELU
        layers.append(Layer(w, b, act))
    return Network(layers)


def train(net: Network, ds: LabeledSet, cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Mini-batch SGD with cross-entropy; returns per-epoch mean losses.

    Deterministic in (net, ds, cfg); aborts if the loss goes non-finite.
    """
    if len(ds) == 0:
        raise DomainError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    n = len(ds)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for idx in iter_batches(order, cfg.batch_size):
            grads, loss = backward(net, ds.batch(idx))
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}; lower the learning rate"
                )
            if cfg.lr > 0:
                net = sgd_step(net, grads, cfg.lr, Direction.DESCEND)
            total += loss * len(idx)
        trace.append(total / n)
    return net, trace
