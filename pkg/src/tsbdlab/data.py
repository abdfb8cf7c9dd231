"""Synthetic corpus generation, triggers, poisoning, and dataset files.

Samples are 8x8 grayscale grids flattened to 64 features in [0, 1]. Each
class has a fixed pseudo-random template; samples are the template plus
clamped Gaussian noise, so corpora stay separable at desk scale.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .nn import Batch
from .util import floor_count

DATASET_MAGIC = b"TSDS"
DATASET_VERSION = 1

DEFAULT_GRID = 8
DEFAULT_NOISE_SIGMA = 0.15

# Fixed stream tags so templates and the blend pattern depend only on the
# class index / grid, never on the corpus seed.
_TEMPLATE_STREAM = 0x7E01
_BLEND_STREAM = 0x7E02


@dataclass(frozen=True)
class PatchTrigger:
    """Overwrite a rectangle of the feature grid with a constant fill."""

    row: int
    col: int
    height: int
    width: int
    fill: float = 1.0

    def __post_init__(self):
        if self.row < 0 or self.col < 0 or self.height < 1 or self.width < 1:
            raise DomainError("patch rectangle must be non-empty and non-negative")
        if not 0.0 <= self.fill <= 1.0:
            raise DomainError(f"patch fill must lie in [0, 1], got {self.fill}")


@dataclass(eq=False)
class BlendTrigger:
    """Blend a fixed pattern into the input: x' = (1-ratio)*x + ratio*pattern."""

    pattern: np.ndarray
    ratio: float

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.pattern.ndim != 1:
            raise DimensionError("blend pattern must be a flat feature vector")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise DomainError("blend pattern entries must lie in [0, 1]")
        if not 0.0 < self.ratio < 1.0:
            raise DomainError(f"blend ratio must lie strictly in (0, 1), got {self.ratio}")


TriggerSpec = PatchTrigger | BlendTrigger


@dataclass(frozen=True)
class PoisonConfig:
    poisoning_ratio: float
    target_label: int
    trigger: TriggerSpec
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.poisoning_ratio <= 1.0:
            raise DomainError(
                f"poisoning ratio must lie in [0, 1], got {self.poisoning_ratio}"
            )
        if self.target_label < 0:
            raise DomainError("target label must be a class index")


def _as_index_array(indices) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.dtype == bool:
        return np.flatnonzero(idx)
    return idx.astype(np.int64, copy=False)


@dataclass
class LabeledSet:
    """Feature/label pairs with per-sample poison bookkeeping."""

    inputs: np.ndarray
    labels: np.ndarray
    poisoned: np.ndarray
    original_labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2:
            raise DimensionError("inputs must be 2-D (samples x features)")
        for name, arr in (
            ("labels", self.labels),
            ("poisoned", self.poisoned),
            ("original_labels", self.original_labels),
        ):
            if arr.shape != (n,):
                raise DimensionError(f"{name} length must equal the sample count")
        if self.num_classes < 2:
            raise DomainError("need at least two classes")
        for name, arr in (("labels", self.labels), ("original_labels", self.original_labels)):
            if n and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise DomainError(f"{name} out of range for {self.num_classes} classes")
        if n and (not np.isfinite(self.inputs).all() or self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise DomainError("features must be finite and lie in [0, 1]")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "LabeledSet":
        idx = _as_index_array(indices)
        return LabeledSet(
            self.inputs[idx].copy(),
            self.labels[idx].copy(),
            self.poisoned[idx].copy(),
            self.original_labels[idx].copy(),
            self.num_classes,
        )

    def batch(self, indices) -> Batch:
        idx = _as_index_array(indices)
        return Batch(self.inputs[idx], self.labels[idx])

    def full_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


def class_template(class_index: int, grid: int = DEFAULT_GRID) -> np.ndarray:
    """Fixed pseudo-random template grid for one class, flattened."""
    if class_index < 0:
        raise DomainError("class index must be non-negative")
    rng = np.random.default_rng([_TEMPLATE_STREAM, class_index])
    return rng.random(grid * grid, dtype=np.float32)


def default_blend_pattern(grid: int = DEFAULT_GRID) -> np.ndarray:
    """Fixed binary blend pattern matching the feature grid.

    High-contrast {0, 1} values keep the blended signal detectable at
    moderate transparency against the corpus noise.
    """
    rng = np.random.default_rng([_BLEND_STREAM, grid])
    return (rng.random(grid * grid) < 0.5).astype(np.float32)


def gen_synthetic(
    seed: int,
    classes: int = 10,
    per_class: int = 500,
    grid: int = DEFAULT_GRID,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> LabeledSet:
    """Class templates plus clamped Gaussian noise; deterministic in seed."""
    if classes < 2:
        raise DomainError("need at least two classes")
    if per_class < 1:
        raise DomainError("need at least one sample per class")
    if noise_sigma < 0:
        raise DomainError("noise sigma must be non-negative")
    rng = np.random.default_rng(seed)
    d = grid * grid
    blocks = []
    for c in range(classes):
        noise = rng.normal(0.0, noise_sigma, size=(per_class, d))
        blocks.append(np.clip(class_template(c, grid) + noise, 0.0, 1.0))
    inputs = np.concatenate(blocks).astype(np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    n = classes * per_class
    return LabeledSet(inputs, labels, np.zeros(n, bool), labels.copy(), classes)


def apply_trigger_batch(inputs: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Apply the trigger to every row; always returns a new array."""
    x = np.asarray(inputs, dtype=np.float32)
    if x.ndim != 2:
        raise DimensionError("expected 2-D inputs (samples x features)")
    d = x.shape[1]
    if isinstance(trigger, PatchTrigger):
        side = math.isqrt(d)
        if side * side != d:
            raise DomainError(f"feature dim {d} is not a square grid")
        if trigger.row + trigger.height > side or trigger.col + trigger.width > side:
            raise DomainError(
                f"patch rectangle exceeds the {side}x{side} feature grid"
            )
        out = x.copy()
        grid = out.reshape(-1, side, side)
        grid[
            :,
            trigger.row : trigger.row + trigger.height,
            trigger.col : trigger.col + trigger.width,
        ] = np.float32(trigger.fill)
        return out
    if isinstance(trigger, BlendTrigger):
        if trigger.pattern.shape[0] != d:
            raise DimensionError(
                f"blend pattern dim {trigger.pattern.shape[0]} != feature dim {d}"
            )
        beta = np.float32(trigger.ratio)
        return np.clip((1 - beta) * x + beta * trigger.pattern, 0.0, 1.0)
    raise DomainError(f"unknown trigger type {type(trigger).__name__}")


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Apply the trigger to a single feature vector."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError("expected a flat feature vector")
    return apply_trigger_batch(x[None, :], trigger)[0]


def poison_dataset(ds: LabeledSet, cfg: PoisonConfig) -> LabeledSet:
    """Trigger and relabel a seeded floor(ratio*N) sample; order preserved."""
    if ds.poisoned.any():
        raise DomainError("dataset is already poisoned")
    if cfg.target_label >= ds.num_classes:
        raise DomainError("target label out of range")
    count = floor_count(cfg.poisoning_ratio, len(ds))
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(ds), size=count, replace=False)
    inputs = ds.inputs.copy()
    labels = ds.labels.copy()
    poisoned = np.zeros(len(ds), bool)
    if count:
        inputs[chosen] = apply_trigger_batch(ds.inputs[chosen], cfg.trigger)
        labels[chosen] = cfg.target_label
        poisoned[chosen] = True
    return LabeledSet(inputs, labels, poisoned, ds.labels.copy(), ds.num_classes)


def clean_subset(ds: LabeledSet, fraction: float, seed: int) -> LabeledSet:
    """Seeded sample of floor(fraction*N) entries drawn only from clean rows."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    count = floor_count(fraction, len(ds))
    if count < 1:
        raise DomainError("fraction too small: subset would be empty")
    clean_idx = np.flatnonzero(~ds.poisoned)
    if count > clean_idx.size:
        raise DomainError(
            f"cannot draw {count} clean samples from {clean_idx.size} available"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(clean_idx, size=count, replace=False))
    return ds.subset(chosen)


def train_test_split(
    ds: LabeledSet, train_fraction: float, seed: int
) -> tuple[LabeledSet, LabeledSet]:
    """Seeded shuffle split; both halves keep ascending original order."""
    if not 0.0 < train_fraction < 1.0:
        raise DomainError("train fraction must lie strictly in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_train = floor_count(train_fraction, len(ds))
    if n_train < 1 or n_train >= len(ds):
        raise DomainError("split leaves an empty train or test side")
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def poisoned_probe(ds: LabeledSet, trigger: TriggerSpec, target_label: int) -> LabeledSet:
    """Every sample triggered and relabeled to the target (poison-unlearning set)."""
    if target_label >= ds.num_classes or target_label < 0:
        raise DomainError("target label out of range")
    inputs = apply_trigger_batch(ds.inputs, trigger)
    labels = np.full(len(ds), target_label, dtype=np.int64)
    return LabeledSet(inputs, labels, np.ones(len(ds), bool), ds.labels.copy(), ds.num_classes)


def save_dataset(ds: LabeledSet, path) -> None:
    """Write the binary dataset format (little-endian)."""
    header = DATASET_MAGIC + struct.pack(
        "<IIII", DATASET_VERSION, len(ds), ds.feature_dim, ds.num_classes
    )
    rec = np.dtype(
        [("x", "<f4", (ds.feature_dim,)), ("y", "<u2"), ("p", "u1"), ("o", "<u2")]
    )
    body = np.empty(len(ds), dtype=rec)
    body["x"] = ds.inputs
    body["y"] = ds.labels
    body["p"] = ds.poisoned
    body["o"] = ds.original_labels
    Path(path).write_bytes(header + body.tobytes())


def load_dataset(path) -> LabeledSet:
    """Read a dataset written by save_dataset; validates the format."""
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise FormatError("truncated dataset header")
    if data[:4] != DATASET_MAGIC:
        raise FormatError("bad magic bytes (not a dataset file)")
    version, n, d, c = struct.unpack("<IIII", data[4:20])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    rec = np.dtype([("x", "<f4", (d,)), ("y", "<u2"), ("p", "u1"), ("o", "<u2")])
    expected = 20 + n * rec.itemsize
    if len(data) != expected:
        raise FormatError(
            f"dataset size mismatch: expected {expected} bytes, got {len(data)}"
        )
    body = np.frombuffer(data[20:], dtype=rec)
    if not np.isin(body["p"], (0, 1)).all():
        raise FormatError("poison flags must be 0 or 1")
    try:
        return LabeledSet(
            body["x"].reshape(n, d).copy(),
            body["y"].astype(np.int64),
            body["p"].astype(bool),
            body["o"].astype(np.int64),
            c,
        )
    except (DimensionError, DomainError) as exc:
        raise FormatError(f"inconsistent dataset contents: {exc}") from exc
