"""MLP leave-out classifier, global remapping, and the checkpoint format.

Checkpoint layout (all integers and floats little-endian)::

    b"LOOC"            magic
    u16                format version (1)
    u32 N, u32 K, u32 part_index
    u16 L              number of weight layers
    u32 x (L + 1)      layer dims [d_in, h1, ..., d_out]
    u32 x d_out        local_map; 0xFFFFFFFF marks the extra OOD output of
                       an SFX head
    per layer: f32 weights [d_k x d_{k+1}] row-major, then f32 bias [d_{k+1}]
    remaining bytes    UTF-8 metadata, one ``key=value`` per line
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from looc.errors import DimensionError, DomainError, FormatError, ValidationError
from looc.tensor import Tensor, matmul, relu, softmax_temp, take_cols

MAGIC = b"LOOC"
FORMAT_VERSION = 1
OOD_SLOT = 0xFFFFFFFF
DEFAULT_HIDDEN = (64, 64)


@dataclass
class MlpClassifier:
    """Rectifier MLP whose outputs are indexed by ``local_map``.

    With ``ood_head`` set the network has one extra output (the SFX loss
    variant's OOD label) after the ``len(local_map)`` class outputs.
    """

    layer_dims: tuple[int, ...]
    weights: list[Tensor]
    biases: list[Tensor]
    local_map: tuple[int, ...]
    n_classes: int
    part_index: int = 0
    n_parts: int = 1
    ood_head: bool = False
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        d_out = self.layer_dims[-1]
        if d_out != len(self.local_map) + int(self.ood_head):
            raise ValidationError(
                f"output width {d_out} does not match local_map of length {len(self.local_map)}"
                + (" plus the OOD output" if self.ood_head else "")
            )
        check_local_map(self.local_map, self.n_classes)

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_local(self) -> int:
        return len(self.local_map)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy_params(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_params(self, arrays: Sequence[np.ndarray]) -> None:
        for p, a in zip(self.parameters(), arrays):
            p.data = np.array(a, dtype=np.float64)


def check_local_map(local_map: Sequence[int], n_classes: int) -> None:
    if len(set(local_map)) != len(local_map):
        raise ValidationError(f"local_map has duplicate entries: {list(local_map)}")
    bad = [c for c in local_map if not 0 <= c < n_classes]
    if bad:
        raise ValidationError(f"local_map entries {bad} outside [0, {n_classes})")


def init_mlp(
    layer_dims: Sequence[int],
    seed: int,
    local_map: Sequence[int] | None = None,
    n_classes: int | None = None,
    part_index: int = 0,
    n_parts: int = 1,
    ood_head: bool = False,
) -> MlpClassifier:
    """He-normal weights (variance 2/fan_in), zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise DomainError(f"layer_dims needs >= 2 positive entries, got {list(layer_dims)}")
    if local_map is None:
        local_map = tuple(range(dims[-1] - int(ood_head)))
    if n_classes is None:
        n_classes = max(local_map) + 1 if local_map else 0
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpClassifier(dims, weights, biases, tuple(local_map), n_classes, part_index, n_parts, ood_head)


def forward_logits(model: MlpClassifier, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.data.ndim != 2 or x.shape[1] != model.d_in:
        raise DimensionError(f"input shape {x.shape} does not match model input width {model.d_in}")
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = matmul(h, w) + b
        if k < last:
            h = relu(h)
    return h


def class_logits(model: MlpClassifier, x) -> Tensor:
    """Logits of the class outputs only (drops an SFX head's OOD output)."""
    logits = forward_logits(model, x)
    if model.ood_head:
        logits = take_cols(logits, np.arange(model.n_local))
    return logits


def predict_probs(model: MlpClassifier, x, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax over the model's retained classes."""
    return softmax_temp(class_logits(model, x), temperature)


def expand_to_global(local_probs, local_map: Sequence[int], n_classes: int) -> np.ndarray:
    """Scatter local columns to their global class ids; other columns are 0."""
    check_local_map(local_map, n_classes)
    local = np.asarray(local_probs.data if isinstance(local_probs, Tensor) else local_probs, dtype=np.float64)
    if local.ndim != 2 or local.shape[1] != len(local_map):
        raise DimensionError(f"local probabilities {local.shape} do not match local_map of length {len(local_map)}")
    out = np.zeros((local.shape[0], n_classes))
    out[:, list(local_map)] = local
    return out


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: MlpClassifier, metadata: dict | None = None) -> bytes:
    meta = dict(model.metadata)
    if metadata:
        meta.update({k: str(v) for k, v in metadata.items()})
    buf = io.BytesIO()
    dims = model.layer_dims
    buf.write(MAGIC)
    buf.write(struct.pack("<HIII", FORMAT_VERSION, model.n_classes, model.n_parts, model.part_index))
    buf.write(struct.pack("<H", len(dims) - 1))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    slots = list(model.local_map) + ([OOD_SLOT] if model.ood_head else [])
    buf.write(struct.pack(f"<{len(slots)}I", *slots))
    for w, b in zip(model.weights, model.biases):
        buf.write(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b.data, dtype="<f4").tobytes())
    for key in sorted(meta):
        buf.write(f"{key}={meta[key]}\n".encode("utf-8"))
    return buf.getvalue()


def model_from_bytes(raw: bytes) -> MlpClassifier:
    view = memoryview(raw)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"checkpoint truncated at byte offset {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    pos = 4
    version, n_classes, n_parts, part_index = take("<HIII")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_layers,) = take("<H")
    dims = take(f"<{n_layers + 1}I")
    slots = take(f"<{dims[-1]}I")
    ood_head = bool(slots) and slots[-1] == OOD_SLOT
    local_map = tuple(slots[:-1] if ood_head else slots)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.array(take(f"<{fan_in * fan_out}f"), dtype=np.float64).reshape(fan_in, fan_out)
        b = np.array(take(f"<{fan_out}f"), dtype=np.float64)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    meta = {}
    for line in bytes(view[pos:]).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return MlpClassifier(tuple(dims), weights, biases, local_map, n_classes, part_index, n_parts, ood_head, meta)


def round_to_stored_precision(model: MlpClassifier) -> MlpClassifier:
    """Round parameters to float32 in place, matching what a checkpoint stores."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    return model


def save_checkpoint(model: MlpClassifier, path: str | os.PathLike, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, metadata))


def load_checkpoint(path: str | os.PathLike) -> MlpClassifier:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
