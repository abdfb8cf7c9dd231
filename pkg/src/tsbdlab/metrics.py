"""Evaluation statistics: ACC, ASR, DER, TAC, coverage, activeness, profiles.

All per-neuron metrics cover hidden layers only; the output layer's
"neurons" are class logits and are never profiled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledSet, TriggerSpec, apply_trigger_batch
from .errors import DimensionError, DomainError
from .nn import Batch, Network, backward, forward, predict
from .training import iter_batches
from .util import ceil_count


@dataclass
class NeuronMap:
    """One scalar per hidden neuron, grouped by layer."""

    layer_indices: tuple[int, ...]
    values: list[np.ndarray]

    def neuron_ids(self) -> list[tuple[int, int]]:
        return [
            (l, k)
            for l, vals in zip(self.layer_indices, self.values)
            for k in range(vals.size)
        ]

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(v, np.float64) for v in self.values])

    def ranking(self) -> list[tuple[int, int]]:
        """Ids ordered by value descending; ties ascending (layer, neuron)."""
        ids = self.neuron_ids()
        layer = np.array([i[0] for i in ids])
        neuron = np.array([i[1] for i in ids])
        order = np.lexsort((neuron, layer, -self.vector()))
        return [ids[i] for i in order]

    def mean(self) -> float:
        return float(self.vector().mean())


# A NeuronMap of mean post-activation values; produced by activation_profile
# with clean inputs (h_c) or triggered inputs (h_p).
ActivationProfile = NeuronMap


def _require_clean(ds: LabeledSet, what: str):
    if len(ds) == 0:
        raise DomainError(f"{what} is empty")
    if ds.poisoned.any():
        raise DomainError(f"{what} must be unpoisoned")


def accuracy(net: Network, test: LabeledSet) -> float:
    """Fraction of clean samples whose argmax prediction matches the label."""
    _require_clean(test, "test set")
    return float((predict(net, test.inputs) == test.labels).mean())


def asr(net: Network, test: LabeledSet, trigger: TriggerSpec, target: int) -> float:
    """Fraction of triggered non-target samples predicted as the target class."""
    _require_clean(test, "test set")
    keep = test.labels != target
    if not keep.any():
        raise DomainError("no samples with true label different from the target")
    triggered = apply_trigger_batch(test.inputs[keep], trigger)
    return float((predict(net, triggered) == target).mean())


def der(acc_before: float, asr_before: float, acc_after: float, asr_after: float) -> float:
    """[max(0, ASR drop) - max(0, ACC drop) + 1] / 2."""
    for name, v in (
        ("acc_before", acc_before),
        ("asr_before", asr_before),
        ("acc_after", acc_after),
        ("asr_after", asr_after),
    ):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1], got {v}")
    return (max(0.0, asr_before - asr_after) - max(0.0, acc_before - acc_after) + 1.0) / 2.0


@dataclass(frozen=True)
class DefenseReport:
    acc_before: float
    asr_before: float
    acc_after: float
    asr_after: float
    der: float

    @classmethod
    def from_rates(cls, acc_before, asr_before, acc_after, asr_after) -> "DefenseReport":
        return cls(
            acc_before,
            asr_before,
            acc_after,
            asr_after,
            der(acc_before, asr_before, acc_after, asr_after),
        )


def activation_profile(
    net: Network, probe: LabeledSet, trigger: TriggerSpec | None = None
) -> ActivationProfile:
    """Mean post-activation per hidden neuron; trigger applied first if given."""
    if len(probe) == 0:
        raise DomainError("probe set is empty")
    inputs = probe.inputs if trigger is None else apply_trigger_batch(probe.inputs, trigger)
    acts, _ = forward(net, Batch(inputs, probe.labels))
    hidden = tuple(net.hidden_indices)
    return NeuronMap(hidden, [acts[l].mean(axis=0, dtype=np.float64) for l in hidden])


def activation_rise(after: ActivationProfile, before: ActivationProfile) -> NeuronMap:
    """Entrywise profile difference (after - before)."""
    if after.layer_indices != before.layer_indices or any(
        a.shape != b.shape for a, b in zip(after.values, before.values)
    ):
        raise DimensionError("profiles cover different neuron sets")
    return NeuronMap(
        after.layer_indices,
        [np.asarray(a, np.float64) - np.asarray(b, np.float64) for a, b in zip(after.values, before.values)],
    )


def tac(net: Network, probe: LabeledSet, trigger: TriggerSpec) -> NeuronMap:
    """|mean activation with trigger - without|, per hidden neuron."""
    _require_clean(probe, "probe set")
    clean = activation_profile(net, probe)
    triggered = activation_profile(net, probe, trigger)
    return NeuronMap(
        clean.layer_indices,
        [np.abs(t - c) for t, c in zip(triggered.values, clean.values)],
    )


def coverage_ratio(order_a, order_b, p: float) -> float:
    """Overlap of the top ceil(p*K) entries of two rankings, / that size."""
    if not 0.0 < p <= 1.0:
        raise DomainError(f"p must lie in (0, 1], got {p}")
    a = list(order_a)
    b = list(order_b)
    if len(set(a)) != len(a) or len(set(b)) != len(b):
        raise DomainError("rankings must not repeat entries")
    if set(a) != set(b):
        raise DomainError("rankings cover different neuron universes")
    k = ceil_count(p, len(b))
    return len(set(a[:k]) & set(b[:k])) / k


def neuron_grad_activeness(
    net: Network, data: LabeledSet, batch_size: int = 32, epochs: int = 1
) -> NeuronMap:
    """Mean per-batch L2 norm of each hidden neuron's weight-gradient row.

    Batches partition the data in order and no updates are applied, so the
    result does not depend on the order batches are processed in.
    """
    if len(data) == 0:
        raise DomainError("activeness probe set is empty")
    if epochs < 1 or batch_size < 1:
        raise DomainError("epochs and batch_size must be >= 1")
    hidden = tuple(net.hidden_indices)
    sums = [np.zeros(net.layers[l].neurons, dtype=np.float64) for l in hidden]
    batches = 0
    for _ in range(epochs):
        for idx in iter_batches(np.arange(len(data)), batch_size):
            grads, _ = backward(net, data.batch(idx))
            for j, l in enumerate(hidden):
                g = grads.weights[l].astype(np.float64, copy=False)
                sums[j] += np.sqrt((g * g).sum(axis=1))
            batches += 1
    return NeuronMap(hidden, [s / batches for s in sums])


def pearson(x, y) -> float:
    """Product-moment correlation; needs nonzero variance on both sides."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise DimensionError("inputs must be equal-length 1-D sequences")
    if x.size < 2:
        raise DomainError("need at least two points")
    cx = x - x.mean()
    cy = y - y.mean()
    vx = float((cx * cx).sum())
    vy = float((cy * cy).sum())
    if vx == 0.0 or vy == 0.0:
        raise DomainError("zero variance input")
    r = float((cx * cy).sum() / np.sqrt(vx * vy))
    return min(1.0, max(-1.0, r))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = np.arange(1, v.size + 1)
    # Tied values share the mean of their occupied rank positions.
    _, inverse = np.unique(v, return_inverse=True)
    sums = np.bincount(inverse, weights=ranks)
    counts = np.bincount(inverse)
    return sums[inverse] / counts[inverse]


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise DimensionError("inputs must be equal-length 1-D sequences")
    if x.size < 2:
        raise DomainError("need at least two points")
    return pearson(_average_ranks(x), _average_ranks(y))
