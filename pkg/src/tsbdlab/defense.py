"""Two-stage backdoor removal.

Stage 1: gradient-ascent unlearning on the defender's clean subset, then
per-neuron weight-change ranking and zero reinitialization of the
most-changed subweights. Stage 2: fine-tuning whose step direction also
penalizes the gradient norm, via a two-gradient approximation that avoids
Hessian products.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import LabeledSet
from .errors import DimensionError, DivergenceError, DomainError, FormatError
from .nn import (
    Direction,
    Gradients,
    Layer,
    Network,
    backward,
    predict,
    save_checkpoint,
    sgd_step,
)
from .training import iter_batches
from .util import ceil_count

NWC_MAGIC = b"TSNW"
NWC_VERSION = 1

# Below this global gradient norm the normalized ascent direction is
# undefined; fall back to the plain gradient.
GRAD_NORM_FLOOR = 1e-12


class Variant(Enum):
    """Reinitialization policy over the selected top-change neurons.

    V1 zeroes every subweight of each selected neuron; V2 zeroes the
    top-m% subweights within each selected neuron; V3 pools all selected
    neurons' subweights and zeroes the global top-m%.
    """

    V1 = "v1"
    V2 = "v2"
    V3 = "v3"


@dataclass(frozen=True)
class UnlearnConfig:
    lr: float = 1e-4
    stop_accuracy: float = 0.10
    max_steps: int = 5000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("unlearning rate must be positive")
        if not 0.0 < self.stop_accuracy < 1.0:
            raise DomainError("stop accuracy must lie strictly in (0, 1)")
        if self.max_steps < 1 or self.batch_size < 1:
            raise DomainError("max_steps and batch_size must be >= 1")


@dataclass(frozen=True)
class FtConfig:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 32
    r: float = 0.05
    alpha: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise DomainError("fine-tuning rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs must be >= 0 and batch_size >= 1")
        if self.r <= 0:
            raise DomainError("approximation scalar r must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError("balance coefficient alpha must lie in [0, 1]")


@dataclass
class NwcRecord:
    """Per-neuron L1 weight change between two networks, hidden layers only.

    nwc[j][k] is the row sum of subweight_change[j] for neuron k; biases
    are excluded throughout.
    """

    layer_indices: tuple[int, ...]
    nwc: list[np.ndarray]
    subweight_change: list[np.ndarray]

    @property
    def is_empty(self) -> bool:
        return sum(v.size for v in self.nwc) == 0

    def total_neurons(self) -> int:
        return sum(v.size for v in self.nwc)

    def neuron_ids(self) -> list[tuple[int, int]]:
        return [
            (l, k)
            for l, values in zip(self.layer_indices, self.nwc)
            for k in range(values.size)
        ]

    def ranking(self) -> list[tuple[int, int]]:
        """Neurons ordered by NWC descending; ties ascending (layer, neuron)."""
        ids = self.neuron_ids()
        layer = np.array([i[0] for i in ids])
        neuron = np.array([i[1] for i in ids])
        values = np.concatenate([np.asarray(v, np.float64) for v in self.nwc])
        order = np.lexsort((neuron, layer, -values))
        return [ids[i] for i in order]


@dataclass
class ReinitMask:
    """Boolean mask over hidden-layer weights; True entries get zeroed."""

    layer_indices: tuple[int, ...]
    masks: list[np.ndarray]
    selected_neurons: list[tuple[int, int]] = field(default_factory=list)

    def true_count(self) -> int:
        return int(sum(m.sum() for m in self.masks))


def _set_accuracy(net: Network, data: LabeledSet) -> float:
    """Fraction of argmax predictions matching the labels as given."""
    return float((predict(net, data.inputs) == data.labels).mean())


def unlearn(
    net: Network, data: LabeledSet, cfg: UnlearnConfig
) -> tuple[Network, int, list[float]]:
    """Gradient-ascent mini-batch loop until accuracy on `data` collapses.

    Accuracy is checked once per epoch over the whole set; the loop stops
    at the first check satisfying accuracy <= cfg.stop_accuracy, or when
    cfg.max_steps updates have been applied. With a clean subset this is
    clean unlearning; with a triggered, target-labeled set the same loop
    performs poison unlearning (the accuracy then reads as attack success).
    """
    if len(data) == 0:
        raise DomainError("cannot unlearn on an empty dataset")
    acc = _set_accuracy(net, data)
    trace = [acc]
    if acc <= cfg.stop_accuracy:
        return net, 0, trace
    rng = np.random.default_rng(cfg.seed)
    steps = 0
    while steps < cfg.max_steps:
        order = rng.permutation(len(data))
        for idx in iter_batches(order, cfg.batch_size):
            grads, loss = backward(net, data.batch(idx))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at unlearning step {steps}")
            net = sgd_step(net, grads, cfg.lr, Direction.ASCEND)
            steps += 1
            if steps >= cfg.max_steps:
                break
        acc = _set_accuracy(net, data)
        trace.append(acc)
        if acc <= cfg.stop_accuracy:
            break
    return net, steps, trace


def compute_nwc(before: Network, after: Network) -> NwcRecord:
    """Absolute per-subweight change and per-neuron row sums, per hidden layer."""
    if before.num_layers != after.num_layers:
        raise DimensionError("networks have different depths")
    for a, b in zip(before.layers, after.layers):
        if a.weights.shape != b.weights.shape:
            raise DimensionError("networks are not shape-congruent")
    hidden = tuple(before.hidden_indices)
    changes = [
        np.abs(after.layers[l].weights - before.layers[l].weights) for l in hidden
    ]
    nwc = [c.sum(axis=1, dtype=np.float64) for c in changes]
    return NwcRecord(hidden, nwc, changes)


def select_reinit_mask(
    record: NwcRecord,
    n_ratio: float,
    m_ratio: float,
    variant: Variant = Variant.V3,
    per_layer: bool = False,
) -> ReinitMask:
    """Choose subweights to zero from the top-NWC neurons.

    Neurons are ranked by NWC descending, globally across hidden layers by
    default or within each layer when per_layer is set; the top
    ceil(n_ratio * count) are selected. V1 masks all their subweights, V2
    the top ceil(m_ratio * fan_in) per neuron by subweight change, V3 the
    top ceil(m_ratio * pool) of all selected neurons' subweights pooled.
    All ties break toward ascending (layer, neuron, subweight) index.
    A ratio of 0 selects nothing.
    """
    if record.is_empty:
        raise DomainError("empty NWC record: network has no hidden layers")
    if not 0.0 <= n_ratio <= 1.0 or not 0.0 <= m_ratio <= 1.0:
        raise DomainError("n_ratio and m_ratio must lie in [0, 1]")

    layer_of = {l: j for j, l in enumerate(record.layer_indices)}
    if per_layer:
        selected: list[tuple[int, int]] = []
        for l, values in zip(record.layer_indices, record.nwc):
            order = np.lexsort((np.arange(values.size), -values))
            for k in order[: ceil_count(n_ratio, values.size)]:
                selected.append((l, int(k)))
    else:
        ranked = record.ranking()
        selected = ranked[: ceil_count(n_ratio, record.total_neurons())]

    masks = [np.zeros(c.shape, dtype=bool) for c in record.subweight_change]
    if variant is Variant.V1:
        for l, k in selected:
            masks[layer_of[l]][k, :] = True
    elif variant is Variant.V2:
        for l, k in selected:
            row = record.subweight_change[layer_of[l]][k]
            order = np.lexsort((np.arange(row.size), -row.astype(np.float64)))
            masks[layer_of[l]][k, order[: ceil_count(m_ratio, row.size)]] = True
    elif variant is Variant.V3:
        if selected:
            vals, layers, neurons, subs = [], [], [], []
            for l, k in selected:
                row = record.subweight_change[layer_of[l]][k]
                vals.append(row.astype(np.float64))
                layers.append(np.full(row.size, l))
                neurons.append(np.full(row.size, k))
                subs.append(np.arange(row.size))
            vals = np.concatenate(vals)
            layers = np.concatenate(layers)
            neurons = np.concatenate(neurons)
            subs = np.concatenate(subs)
            order = np.lexsort((subs, neurons, layers, -vals))
            for i in order[: ceil_count(m_ratio, vals.size)]:
                masks[layer_of[layers[i]]][neurons[i], subs[i]] = True
    else:
        raise DomainError(f"unknown variant {variant!r}")
    return ReinitMask(record.layer_indices, masks, list(selected))


def zero_reinit(net: Network, mask: ReinitMask) -> Network:
    """Zero exactly the masked subweights; everything else is untouched."""
    for l, m in zip(mask.layer_indices, mask.masks):
        if l not in net.hidden_indices:
            raise DimensionError(f"mask covers layer {l} outside the hidden range")
        if m.shape != net.layers[l].weights.shape:
            raise DimensionError(f"mask shape mismatch at layer {l}")
    out = net.copy()
    for l, m in zip(mask.layer_indices, mask.masks):
        out.layers[l].weights[m] = 0.0
    return out


def regulated_direction(theta: np.ndarray, grad_fn, r: float, alpha: float) -> np.ndarray:
    """Generic two-evaluation step direction for a flat parameter vector.

    Returns (1-alpha)*g + alpha*grad_fn(theta + r*g/||g||) with g =
    grad_fn(theta); exact for the norm-penalized objective when the loss
    is quadratic. Computed in float64; used for surrogate losses and tests.
    """
    theta = np.asarray(theta, dtype=np.float64)
    g1 = np.asarray(grad_fn(theta), dtype=np.float64)
    if alpha == 0:
        return g1
    norm = float(np.linalg.norm(g1))
    if norm < GRAD_NORM_FLOOR:
        return g1
    g2 = np.asarray(grad_fn(theta + r * g1 / norm), dtype=np.float64)
    return (1 - alpha) * g1 + alpha * g2


def _global_grad_norm(grads: Gradients) -> float:
    total = 0.0
    for arr in (*grads.weights, *grads.biases):
        a = arr.astype(np.float64, copy=False)
        total += float((a * a).sum())
    return math.sqrt(total)


def regulated_grad(net: Network, batch, r: float, alpha: float) -> Gradients:
    """Gradient-norm-regulated cross-entropy gradient on one mini-batch.

    Computes g1 at the current parameters, re-evaluates the gradient at
    theta + r*g1/||g1||_2 (global L2 norm over all parameters jointly),
    and blends (1-alpha)*g1 + alpha*g2. alpha = 0 returns g1 untouched;
    a vanishing ||g1|| falls back to g1.
    """
    if r <= 0:
        raise DomainError("approximation scalar r must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("balance coefficient alpha must lie in [0, 1]")
    g1, _ = backward(net, batch)
    if not all(np.isfinite(a).all() for a in (*g1.weights, *g1.biases)):
        raise DivergenceError("non-finite gradient in regulated step")
    if alpha == 0:
        return g1
    norm = _global_grad_norm(g1)
    if norm < GRAD_NORM_FLOOR:
        return g1
    scale = r / norm
    perturbed = Network(
        [
            Layer(l.weights + scale * gw, l.biases + scale * gb, l.activation)
            for l, gw, gb in zip(net.layers, g1.weights, g1.biases)
        ]
    )
    g2, _ = backward(perturbed, batch)
    weights = [(1 - alpha) * a + alpha * b for a, b in zip(g1.weights, g2.weights)]
    biases = [(1 - alpha) * a + alpha * b for a, b in zip(g1.biases, g2.biases)]
    if not all(np.isfinite(a).all() for a in (*weights, *biases)):
        raise DivergenceError("non-finite gradient in regulated step")
    return Gradients(weights, biases)


def activeness_ft(net: Network, data: LabeledSet, cfg: FtConfig) -> Network:
    """Descend on the regulated gradient for epochs * batches steps.

    With alpha = 0 this is exactly vanilla fine-tuning; with epochs = 0
    the input network is returned unchanged.
    """
    if len(data) == 0:
        raise DomainError("cannot fine-tune on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for idx in iter_batches(order, cfg.batch_size):
            grads = regulated_grad(net, data.batch(idx), cfg.r, cfg.alpha)
            if cfg.lr > 0:
                net = sgd_step(net, grads, cfg.lr, Direction.DESCEND)
    return net


@dataclass
class DefenseRun:
    """All intermediate artifacts of one full defense pipeline."""

    unlearned: Network
    unlearn_steps: int
    unlearn_trace: list[float]
    nwc: NwcRecord
    mask: ReinitMask
    reinitialized: Network
    finetuned: Network


def tsbd_run(
    backdoored: Network,
    clean_data: LabeledSet,
    n_ratio: float = 0.15,
    m_ratio: float = 0.7,
    unlearn_cfg: UnlearnConfig | None = None,
    ft_cfg: FtConfig | None = None,
    variant: Variant = Variant.V3,
    per_layer: bool = False,
    out_dir=None,
) -> DefenseRun:
    """Full pipeline: unlearn -> NWC -> reinit mask -> zero reinit -> fine-tune.

    When out_dir is given, each stage checkpoint is persisted before the
    next stage starts (unlearned.tsbd, reinit.tsbd, final.tsbd).
    """
    unlearn_cfg = unlearn_cfg or UnlearnConfig()
    ft_cfg = ft_cfg or FtConfig()
    out = Path(out_dir) if out_dir is not None else None

    unlearned, steps, trace = unlearn(backdoored, clean_data, unlearn_cfg)
    if out:
        save_checkpoint(unlearned, out / "unlearned.tsbd")
    record = compute_nwc(backdoored, unlearned)
    mask = select_reinit_mask(record, n_ratio, m_ratio, variant, per_layer)
    reinitialized = zero_reinit(backdoored, mask)
    if out:
        save_checkpoint(reinitialized, out / "reinit.tsbd")
    finetuned = activeness_ft(reinitialized, clean_data, ft_cfg)
    if out:
        save_checkpoint(finetuned, out / "final.tsbd")
    return DefenseRun(unlearned, steps, trace, record, mask, reinitialized, finetuned)


def export_nwc_csv(record: NwcRecord, path) -> None:
    """Write per-neuron NWC values as layer,neuron,nwc rows."""
    lines = ["layer,neuron,nwc"]
    for l, values in zip(record.layer_indices, record.nwc):
        for k, v in enumerate(values):
            lines.append(f"{l},{k},{float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_subweight_changes(record: NwcRecord, path) -> None:
    """Write per-subweight changes as a binary tensor file (magic TSNW)."""
    parts = [NWC_MAGIC, struct.pack("<II", NWC_VERSION, len(record.layer_indices))]
    for l, change in zip(record.layer_indices, record.subweight_change):
        parts.append(struct.pack("<III", l, change.shape[0], change.shape[1]))
        parts.append(np.ascontiguousarray(change, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_subweight_changes(path) -> NwcRecord:
    """Read a TSNW file back into an NwcRecord (row sums recomputed)."""
    data = Path(path).read_bytes()
    cur = 0

    def take(n: int, what: str) -> bytes:
        nonlocal cur
        if cur + n > len(data):
            raise FormatError(f"truncated tensor file: ran out of bytes in {what}")
        out = data[cur : cur + n]
        cur += n
        return out

    if take(4, "magic") != NWC_MAGIC:
        raise FormatError("bad magic bytes (not a subweight-change file)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != NWC_VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    layer_indices = []
    changes = []
    for i in range(count):
        l, rows, cols = struct.unpack("<III", take(12, f"tensor {i} header"))
        vals = np.frombuffer(take(4 * rows * cols, f"tensor {i} data"), dtype="<f4")
        if not np.isfinite(vals).all() or (rows * cols and vals.min() < 0):
            raise FormatError(f"invalid change values in tensor {i}")
        layer_indices.append(l)
        changes.append(vals.reshape(rows, cols).copy())
    if cur != len(data):
        raise FormatError(f"{len(data) - cur} trailing bytes after last tensor")
    nwc = [c.sum(axis=1, dtype=np.float64) for c in changes]
    return NwcRecord(tuple(layer_indices), nwc, changes)
