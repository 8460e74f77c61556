"""Datasets, class partitions, leave-out views and synthetic generators."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from looc.errors import CorruptRecordError, DomainError, FormatError, ValidationError

CIFAR_RECORD_BYTES = 3073
CIFAR_PIXELS = 3072
CIFAR_IMAGE_SHAPE = (3, 32, 32)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus integer labels in ``[0, n_classes)``.

    ``image_shape`` is ``(C, H, W)`` when each feature row is a flattened
    channel-major image; augmentation only applies to such datasets.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"
    value_range: tuple[float, float] | None = None
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"features {self.features.shape} and labels {self.labels.shape} do not align"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.features).all():
            raise ValidationError(f"{self.name}: features contain NaN or Inf")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            self.n_classes,
            name or self.name,
            self.value_range,
            self.image_shape,
        )


@dataclass(frozen=True)
class ClassPartition:
    parts: tuple[tuple[int, ...], ...]
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.parts)

    @property
    def n_classes(self) -> int:
        return sum(len(p) for p in self.parts)

    def part_of(self, cls: int) -> int:
        for i, part in enumerate(self.parts):
            if cls in part:
                return i
        raise ValidationError(f"class {cls} is not in the partition")


@dataclass(frozen=True)
class LeaveOutView:
    id_data: LabeledDataset  # labels are local ids
    ood_data: np.ndarray
    local_map: tuple[int, ...]
    part_index: int
    n_classes: int
    n_parts: int


# ---------------------------------------------------------------------------
# partitions


def partition_random(n_classes: int, k: int, seed: int) -> ClassPartition:
    """Shuffle the classes and deal them into ``k`` near-equal parts.

    The first ``n_classes % k`` parts receive one extra class.
    """
    if k < 2 or k > n_classes:
        raise DomainError(f"need 2 <= K <= N, got K={k}, N={n_classes}")
    order = np.random.default_rng(seed).permutation(n_classes)
    base, extra = divmod(n_classes, k)
    parts, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        parts.append(tuple(sorted(int(c) for c in order[start:start + size])))
        start += size
    return ClassPartition(tuple(parts), seed)


def partition_manual(groups: Sequence[Sequence[int]], n_classes: int | None = None) -> ClassPartition:
    parts = tuple(tuple(int(c) for c in g) for g in groups)
    seen: dict[int, int] = {}
    overlap = set()
    for part in parts:
        for c in part:
            if c in seen:
                overlap.add(c)
            seen[c] = seen.get(c, 0) + 1
    if overlap:
        raise ValidationError(f"manual partition overlaps on classes {sorted(overlap)}")
    if any(len(p) == 0 for p in parts):
        raise ValidationError("manual partition has an empty group")
    n = n_classes if n_classes is not None else (max(seen) + 1 if seen else 0)
    missing = sorted(set(range(n)) - set(seen))
    if missing:
        raise ValidationError(f"manual partition is missing classes {missing}")
    stray = sorted(c for c in seen if c < 0 or c >= n)
    if stray:
        raise ValidationError(f"manual partition has out-of-range classes {stray}")
    return ClassPartition(parts)


def leaveout_view(data: LabeledDataset, partition: ClassPartition, i: int) -> LeaveOutView:
    if not 0 <= i < partition.k:
        raise DomainError(f"part index {i} outside [0, {partition.k})")
    left_out = np.asarray(partition.parts[i], dtype=np.int64)
    local_map = tuple(c for c in range(data.n_classes) if c not in set(partition.parts[i]))
    is_ood = np.isin(data.labels, left_out)
    to_local = np.full(data.n_classes, -1, dtype=np.int64)
    to_local[list(local_map)] = np.arange(len(local_map))
    id_idx = np.flatnonzero(~is_ood)
    id_data = LabeledDataset(
        data.features[id_idx],
        to_local[data.labels[id_idx]],
        len(local_map),
        f"{data.name}/in{i}",
        data.value_range,
        data.image_shape,
    )
    return LeaveOutView(
        id_data, data.features[is_ood], local_map, i, data.n_classes, partition.k
    )


def restrict_to_classes(data: LabeledDataset, local_map: Sequence[int]) -> LabeledDataset:
    """Keep samples whose class is in ``local_map`` and relabel them locally."""
    to_local = np.full(data.n_classes, -1, dtype=np.int64)
    to_local[list(local_map)] = np.arange(len(local_map))
    keep = np.flatnonzero(to_local[data.labels] >= 0)
    return LabeledDataset(
        data.features[keep],
        to_local[data.labels[keep]],
        len(local_map),
        data.name,
        data.value_range,
        data.image_shape,
    )


# ---------------------------------------------------------------------------
# generators


def mixture_centers(n_classes: int, dim: int, radius: float = 1.0) -> np.ndarray:
    """Class centers: evenly spaced on a circle for dim=2, else on +/- axes."""
    centers = np.zeros((n_classes, dim))
    if dim == 2:
        angles = 2 * np.pi * np.arange(n_classes) / n_classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
        return centers
    for c in range(n_classes):
        axis = c % dim
        ring, sign_bit = divmod(c // dim, 2)
        centers[c, axis] = radius * (ring + 1) * (-1 if sign_bit else 1)
    return centers


def synth_gaussian_mixture(
    n_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    radius: float = 1.0,
    name: str = "mixture",
) -> LabeledDataset:
    if n_classes < 2 or per_class < 1 or dim < 1:
        raise DomainError("need n_classes >= 2, per_class >= 1, dim >= 1")
    rng = np.random.default_rng(seed)
    centers = mixture_centers(n_classes, dim, radius)
    labels = np.repeat(np.arange(n_classes), per_class)
    features = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels, n_classes, name)


def gaussian_blob(center: Sequence[float], count: int, spread: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    return center + spread * rng.standard_normal((count, center.size))


def noise_uniform(count: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count, dim))


def noise_gaussian(count: int, dim: int, seed: int) -> np.ndarray:
    x = np.random.default_rng(seed).normal(0.5, 1.0, size=(count, dim))
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


def parse_cifar10_bytes(raw: bytes, name: str = "cifar10") -> LabeledDataset:
    if len(raw) % CIFAR_RECORD_BYTES:
        whole = len(raw) // CIFAR_RECORD_BYTES
        raise FormatError(
            f"{name}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}; "
            f"trailing partial record starts at byte offset {whole * CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise CorruptRecordError(
            f"{name}: record {bad[0]} (byte offset {bad[0] * CIFAR_RECORD_BYTES}) has label {labels[bad[0]]}"
        )
    features = records[:, 1:].astype(np.float64) / 255.0
    return LabeledDataset(features, labels, 10, name, (0.0, 1.0), CIFAR_IMAGE_SHAPE)


def load_cifar10_binary(paths: Sequence[str | os.PathLike]) -> LabeledDataset:
    """Read and concatenate CIFAR-10 binary batch files."""
    parts = []
    for path in paths:
        with open(path, "rb") as fh:
            parts.append(parse_cifar10_bytes(fh.read(), name=os.fspath(path)))
    if not parts:
        return LabeledDataset(np.zeros((0, CIFAR_PIXELS)), np.zeros(0, np.int64), 10, "cifar10",
                              (0.0, 1.0), CIFAR_IMAGE_SHAPE)
    return LabeledDataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        10,
        "cifar10",
        (0.0, 1.0),
        CIFAR_IMAGE_SHAPE,
    )


def stratified_subsample(data: LabeledDataset, count: int, seed: int) -> LabeledDataset:
    """Uniform random subsample without replacement, original order kept."""
    if count >= len(data):
        return data
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))[:count]
    return data.subset(np.sort(idx), f"{data.name}[{count}]")


# ---------------------------------------------------------------------------
# augmentation


def augment(
    features: np.ndarray,
    image_shape: tuple[int, int, int] | None,
    pad: int,
    seed: int | np.random.Generator,
    flip_prob: float = 0.5,
) -> np.ndarray:
    """Random horizontal flip and padded random crop, one draw per sample.

    Returns ``features`` untouched when ``image_shape`` is None.
    """
    if image_shape is None:
        return features
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c, h, w = image_shape
    n = features.shape[0]
    imgs = features.reshape(n, c, h, w)
    flips = rng.random(n) < flip_prob
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.where(flips[:, None, None, None], imgs[..., ::-1], imgs)
    if pad > 0:
        canvas = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(imgs)
        for s in range(n):
            dy, dx = offsets[s]
            out[s] = canvas[s, :, dy:dy + h, dx:dx + w]
    return out.reshape(n, -1)
