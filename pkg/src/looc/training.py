"""Leave-out classifier training: losses, SGD, checkpoint selection."""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from looc import metrics
from looc.data import ClassPartition, LabeledDataset, LeaveOutView, augment, leaveout_view, restrict_to_classes
from looc.detection import ScoreVariant, classifier_ood_score
from looc.errors import ConfigurationError, ContractViolation, DimensionError, DomainError
from looc.model import (
    DEFAULT_HIDDEN,
    MlpClassifier,
    class_logits,
    forward_logits,
    init_mlp,
    round_to_stored_precision,
)
from looc.tensor import Tensor, entropy, log, mean, pick, relu, scale, softmax_temp

logger = logging.getLogger(__name__)

VALIDATION_TEMPERATURE = 1000.0
VALIDATION_SCORE = ScoreVariant.SOFTMAX_PLUS_ENTROPY_AT_TEMP


class LossVariant(str, enum.Enum):
    SFX = "SFX"
    MAX_ENTROPY_DIFF = "MaxEntropyDiff"
    MARGIN_ENTROPY = "MarginEntropy"

    @classmethod
    def parse(cls, value) -> "LossVariant":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown loss variant {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_start: float = 0.1
    lr_end: float = 0.0001
    margin: float = 0.4
    beta: float = 1.0
    delta: float = 2.0
    loss_variant: LossVariant = LossVariant.MARGIN_ENTROPY
    seed: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    augment_pad: int = 4

    def __post_init__(self):
        object.__setattr__(self, "loss_variant", LossVariant.parse(self.loss_variant))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.margin < 0 or self.beta < 0 or self.delta < 0:
            raise ConfigurationError("margin, beta and delta must be non-negative")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigurationError(f"need lr_start >= lr_end > 0, got {self.lr_start} -> {self.lr_end}")


# ---------------------------------------------------------------------------
# losses


def _as_prob_tensor(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))


def cross_entropy(probs: Tensor, labels) -> Tensor:
    probs = _as_prob_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DomainError(f"labels must lie in [0, {probs.shape[1]})")
    return scale(mean(log(pick(probs, labels))), -1.0)


def margin_entropy_loss(id_probs, labels, ood_probs, margin: float, beta: float) -> Tensor:
    """Cross-entropy plus ``beta * max(margin + mean H(id) - mean H(ood), 0)``."""
    id_probs = _as_prob_tensor(id_probs)
    if id_probs.shape[0] < 1:
        raise ContractViolation("margin_entropy_loss needs at least one ID sample")
    ce = cross_entropy(id_probs, labels)
    if beta == 0:
        return ce
    ood_probs = _as_prob_tensor(ood_probs)
    if ood_probs.shape[0] < 1:
        raise ContractViolation("margin_entropy_loss needs at least one OOD sample")
    gap = mean(entropy(id_probs)) - mean(entropy(ood_probs)) + margin
    return ce + scale(relu(gap), beta)


def max_entropy_diff_loss(id_probs, labels, ood_probs, beta: float) -> Tensor:
    """Cross-entropy plus ``beta * (mean H(id) - mean H(ood))`` with no bound."""
    id_probs = _as_prob_tensor(id_probs)
    ood_probs = _as_prob_tensor(ood_probs)
    if ood_probs.shape[0] < 1:
        raise ContractViolation("MaxEntropyDiff needs at least one OOD sample")
    ce = cross_entropy(id_probs, labels)
    return ce + scale(mean(entropy(id_probs)) - mean(entropy(ood_probs)), beta)


def loss_variant_eval(
    model: MlpClassifier,
    variant,
    id_x: np.ndarray,
    id_y: np.ndarray,
    ood_x: np.ndarray,
    cfg: TrainConfig,
) -> Tensor:
    variant = LossVariant.parse(variant)
    if (variant is LossVariant.SFX) != model.ood_head:
        raise ConfigurationError(
            f"loss {variant.value} needs a model {'with' if variant is LossVariant.SFX else 'without'} an OOD output"
        )
    if variant is LossVariant.SFX:
        x = np.concatenate([id_x, ood_x]) if len(ood_x) else id_x
        y = np.concatenate([id_y, np.full(len(ood_x), model.n_local, dtype=np.int64)])
        return cross_entropy(softmax_temp(forward_logits(model, x)), y)
    id_p = softmax_temp(forward_logits(model, id_x))
    ood_p = softmax_temp(forward_logits(model, ood_x)) if len(ood_x) else Tensor(np.zeros((0, model.n_local)))
    if variant is LossVariant.MAX_ENTROPY_DIFF:
        return max_entropy_diff_loss(id_p, id_y, ood_p, cfg.beta)
    return margin_entropy_loss(id_p, id_y, ood_p, cfg.margin, cfg.beta)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: dict,
             lr: float, momentum: float, weight_decay: float) -> Sequence[Tensor]:
    """SGD with momentum and coupled weight decay, in place.

    ``v <- momentum * v + (g + weight_decay * w)``; ``w <- w - lr * v``.
    ``state`` holds the velocities keyed by parameter position.
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        v = state.get(i)
        step = g + weight_decay * p.data
        v = step if v is None else momentum * v + step
        state[i] = v
        p.data = p.data - lr * v
    return params


def linear_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 1:
        return lr_end
    frac = step / (total_steps - 1)
    return lr_start + (lr_end - lr_start) * frac


# ---------------------------------------------------------------------------
# checkpoint selection


@dataclass
class EpochRecord:
    epoch: int
    accuracy: float
    ood_error: float
    train_loss: float = float("nan")
    lr: float = float("nan")
    params: list[np.ndarray] | None = field(default=None, repr=False)


def select_checkpoint(history: Sequence[EpochRecord], delta: float) -> EpochRecord:
    """Least OOD error among epochs within ``delta`` of the best accuracy.

    Ties go to the later epoch.
    """
    if not history:
        raise ContractViolation("empty training history")
    best_acc = max(r.accuracy for r in history)
    eligible = [r for r in history if r.accuracy >= best_acc - delta]
    best = eligible[0]
    for r in eligible[1:]:
        if r.ood_error <= best.ood_error:
            best = r
    return best


def validation_accuracy(model: MlpClassifier, val: LabeledDataset) -> float:
    """Accuracy (%) on ``val`` whose labels are already local ids."""
    if len(val) == 0:
        return 0.0
    pred = class_logits(model, val.features).data.argmax(axis=1)
    return metrics.cls_accuracy(pred, val.labels)


def validation_ood_error(model: MlpClassifier, val_id: np.ndarray, val_ood: np.ndarray) -> float:
    id_s = classifier_ood_score(model, val_id, VALIDATION_TEMPERATURE, VALIDATION_SCORE)
    ood_s = classifier_ood_score(model, val_ood, VALIDATION_TEMPERATURE, VALIDATION_SCORE)
    return metrics.fpr_at_95_tpr(id_s, ood_s)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    model: MlpClassifier
    selected: EpochRecord
    history: list[EpochRecord]

    def log_rows(self, part_index: int) -> list[tuple]:
        return [(part_index, r.epoch, r.train_loss, r.accuracy, r.ood_error, r.lr) for r in self.history]


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


class _CyclingSampler:
    """Endless minibatches over ``n`` items, reshuffling after each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + k]
            out.append(chunk)
            self.pos += chunk.size
            k -= chunk.size
        return np.concatenate(out)


def train_leaveout_classifier(
    view: LeaveOutView,
    val_id: LabeledDataset,
    val_ood: np.ndarray,
    cfg: TrainConfig,
) -> TrainResult:
    """Train one classifier on ``view`` and return the selected checkpoint.

    ``val_id`` carries global labels; it is restricted to the retained
    classes here. The returned model holds float32-rounded parameters, i.e.
    exactly what a checkpoint stores.
    """
    if len(view.id_data) == 0 or len(view.ood_data) == 0:
        raise ConfigurationError(f"leave-out view {view.part_index} has an empty ID or OOD side")
    val_local = restrict_to_classes(val_id, view.local_map)
    if len(val_local) == 0 or len(val_ood) == 0:
        raise ConfigurationError("validation sets must be non-empty")

    sfx = cfg.loss_variant is LossVariant.SFX
    n_local = len(view.local_map)
    dims = (view.id_data.dim, *cfg.hidden, n_local + int(sfx))
    model = init_mlp(dims, cfg.seed, view.local_map, view.n_classes, view.part_index, view.n_parts, ood_head=sfx)

    id_rng, ood_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    ood_sampler = _CyclingSampler(len(view.ood_data), ood_rng)
    X, Y = view.id_data.features, view.id_data.labels
    image_shape = view.id_data.image_shape

    def evaluate(epoch, loss, lr):
        return EpochRecord(
            epoch,
            validation_accuracy(model, val_local),
            validation_ood_error(model, val_local.features, val_ood),
            loss,
            lr,
            model.copy_params(),
        )

    steps_per_epoch = math.ceil(len(X) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        history.append(evaluate(0, float("nan"), cfg.lr_start))

    state: dict = {}
    params = model.parameters()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        lr = cfg.lr_start
        for idx in _epoch_batches(len(X), cfg.batch_size, id_rng):
            ood_idx = ood_sampler.take(idx.size)
            id_x = augment(X[idx], image_shape, cfg.augment_pad, aug_rng)
            ood_x = augment(view.ood_data[ood_idx], image_shape, cfg.augment_pad, aug_rng)
            model.zero_grad()
            loss = loss_variant_eval(model, cfg.loss_variant, id_x, Y[idx], ood_x, cfg)
            loss.backward()
            lr = linear_lr(step, total_steps, cfg.lr_start, cfg.lr_end)
            sgd_step(params, [p.grad for p in params], state, lr, cfg.momentum, cfg.weight_decay)
            losses.append(loss.item())
            step += 1
        history.append(evaluate(epoch, float(np.mean(losses)), lr))
        logger.debug("part %d epoch %d loss %.4f acc %.2f ood_err %.2f", view.part_index, epoch,
                   history[-1].train_loss, history[-1].accuracy, history[-1].ood_error)

    chosen = select_checkpoint(history, cfg.delta)
    model.load_params(chosen.params)
    round_to_stored_precision(model)
    model.metadata = {
        "epoch": str(chosen.epoch),
        "accuracy": repr(chosen.accuracy),
        "ood_error": repr(chosen.ood_error),
        "seed": str(cfg.seed),
        "loss_variant": cfg.loss_variant.value,
    }
    model.zero_grad()
    return TrainResult(model, chosen, history)


def _train_part(args) -> TrainResult:
    data, partition, i, val_id, val_ood, cfg = args
    view = leaveout_view(data, partition, i)
    return train_leaveout_classifier(view, val_id, val_ood, replace(cfg, seed=cfg.seed + i))


def train_ensemble(
    data: LabeledDataset,
    partition: ClassPartition,
    val_id: LabeledDataset,
    val_ood: np.ndarray,
    cfg: TrainConfig,
    workers: int = 1,
) -> list[TrainResult]:
    """Train the K leave-out classifiers; classifier i uses seed ``cfg.seed + i``."""
    if partition.n_classes != data.n_classes:
        raise ConfigurationError(f"partition covers {partition.n_classes} classes, dataset has {data.n_classes}")
    jobs = [(data, partition, i, val_id, val_ood, cfg) for i in range(partition.k)]
    if workers <= 1:
        return [_train_part(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_part, jobs))


def train_baseline(data: LabeledDataset, val_id: LabeledDataset, cfg: TrainConfig) -> MlpClassifier:
    """Single all-class classifier trained with plain cross-entropy."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    aug_rng = np.random.default_rng(cfg.seed + 7919)
    model = init_mlp((data.dim, *cfg.hidden, data.n_classes), cfg.seed, n_classes=data.n_classes)
    params = model.parameters()
    state: dict = {}
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    best_acc, best_params = -1.0, model.copy_params()
    for _ in range(cfg.epochs):
        for idx in _epoch_batches(len(data), cfg.batch_size, rng):
            x = augment(data.features[idx], data.image_shape, cfg.augment_pad, aug_rng)
            model.zero_grad()
            loss = cross_entropy(softmax_temp(forward_logits(model, x)), data.labels[idx])
            loss.backward()
            lr = linear_lr(step, total_steps, cfg.lr_start, cfg.lr_end)
            sgd_step(params, [p.grad for p in params], state, lr, cfg.momentum, cfg.weight_decay)
            step += 1
        acc = validation_accuracy(model, val_id)
        if acc >= best_acc:
            best_acc, best_params = acc, model.copy_params()
    model.load_params(best_params)
    round_to_stored_precision(model)
    model.zero_grad()
    return model
