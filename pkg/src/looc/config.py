"""Flat ``section.key=value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are errors, with the
offending line number in the message.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from looc.detection import DetectorConfig, ScoreVariant
from looc.errors import ConfigurationError
from looc.training import LossVariant, TrainConfig

EVAL_SET_NAMES = ("uniform", "gaussian", "heldout_cluster", "id_holdout")
NOISE_KINDS = ("uniform", "gaussian")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _groups(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_ints(g) for g in text.split(";") if g.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(",".join(str(v) for v in g) for g in value)
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    seeds: tuple[int, ...] = (0,)
    threads: int = 1

    dataset_kind: str = "mixture"
    classes: int = 8
    dim: int = 16
    spread: float = 0.25
    radius: float = 1.0
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 200
    data_seed: int = 100
    cifar_train: tuple[str, ...] = ()
    cifar_test: tuple[str, ...] = ()
    subsample: int = 2000

    k: int = 4
    partition_mode: str = "random"
    groups: tuple[tuple[int, ...], ...] = ()

    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    eval_sets: tuple[str, ...] = EVAL_SET_NAMES
    eval_count: int = 1000
    eval_seed: int = 200
    val_ood_kind: str = "uniform"
    val_ood_count: int = 500
    val_ood_seed: int = 203

    ablate_splits: tuple[int, ...] = (3, 5, 10, 20)
    ablate_epsilons: tuple[float, ...] = (0.0, 0.000313, 0.000625, 0.00125, 0.002, 0.003)
    ablate_temperatures: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0, 5000.0)

    def __post_init__(self):
        validate(self)

    def eval_set_seed(self, name: str) -> int:
        return self.eval_seed + EVAL_SET_NAMES.index(name)

    def eval_spec(self, name: str) -> tuple[str, int]:
        """(kind, seed) identifying the samples of a named evaluation set."""
        return name, self.eval_set_seed(name)

    def with_seed_train(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed * 1000)


# key -> (attribute path, parser)
_KEYS: dict[str, tuple[str, Callable[[str], Any]]] = {
    "name": ("name", str),
    "output_dir": ("output_dir", str),
    "seeds": ("seeds", _ints),
    "threads": ("threads", int),
    "dataset.kind": ("dataset_kind", str),
    "dataset.classes": ("classes", int),
    "dataset.dim": ("dim", int),
    "dataset.spread": ("spread", float),
    "dataset.radius": ("radius", float),
    "dataset.train_per_class": ("train_per_class", int),
    "dataset.val_per_class": ("val_per_class", int),
    "dataset.test_per_class": ("test_per_class", int),
    "dataset.seed": ("data_seed", int),
    "dataset.cifar_train": ("cifar_train", _names),
    "dataset.cifar_test": ("cifar_test", _names),
    "dataset.subsample": ("subsample", int),
    "partition.k": ("k", int),
    "partition.mode": ("partition_mode", str),
    "partition.groups": ("groups", _groups),
    "model.hidden": ("train.hidden", _ints),
    "train.epochs": ("train.epochs", int),
    "train.batch_size": ("train.batch_size", int),
    "train.momentum": ("train.momentum", float),
    "train.weight_decay": ("train.weight_decay", float),
    "train.lr_start": ("train.lr_start", float),
    "train.lr_end": ("train.lr_end", float),
    "train.margin": ("train.margin", float),
    "train.beta": ("train.beta", float),
    "train.delta": ("train.delta", float),
    "train.loss": ("train.loss_variant", LossVariant.parse),
    "train.augment_pad": ("train.augment_pad", int),
    "detector.temperature": ("detector.temperature", float),
    "detector.epsilon": ("detector.epsilon", float),
    "detector.score": ("detector.score_variant", ScoreVariant.parse),
    "eval.sets": ("eval_sets", _names),
    "eval.count": ("eval_count", int),
    "eval.seed": ("eval_seed", int),
    "val_ood.kind": ("val_ood_kind", str),
    "val_ood.count": ("val_ood_count", int),
    "val_ood.seed": ("val_ood_seed", int),
    "ablate.splits": ("ablate_splits", _ints),
    "ablate.epsilons": ("ablate_epsilons", _floats),
    "ablate.temperatures": ("ablate_temperatures", _floats),
}


def validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset_kind not in ("mixture", "cifar10"):
        raise ConfigurationError(f"dataset.kind: unknown kind {cfg.dataset_kind!r} (mixture, cifar10)")
    n = 10 if cfg.dataset_kind == "cifar10" else cfg.classes
    if cfg.partition_mode not in ("random", "manual"):
        raise ConfigurationError(f"partition.mode: unknown mode {cfg.partition_mode!r} (random, manual)")
    if cfg.partition_mode == "random" and not 2 <= cfg.k <= n:
        raise ConfigurationError(f"partition.k: need 2 <= K <= N, got K={cfg.k}, N={n}")
    if cfg.partition_mode == "manual" and not cfg.groups:
        raise ConfigurationError("partition.groups: required when partition.mode=manual")
    if not cfg.seeds:
        raise ConfigurationError("seeds: at least one seed is required")
    unknown = [s for s in cfg.eval_sets if s not in EVAL_SET_NAMES]
    if unknown:
        raise ConfigurationError(f"eval.sets: unknown sets {unknown}; available: {', '.join(EVAL_SET_NAMES)}")
    if cfg.val_ood_kind not in NOISE_KINDS:
        raise ConfigurationError(f"val_ood.kind: must be one of {NOISE_KINDS}")
    val_spec = (cfg.val_ood_kind, cfg.val_ood_seed)
    clash = [s for s in EVAL_SET_NAMES if cfg.eval_spec(s) == val_spec]
    if clash:
        raise ConfigurationError(f"val_ood: validation OOD data coincides with evaluation set {clash[0]!r}")
    if cfg.dataset_kind == "cifar10" and not cfg.cifar_train:
        raise ConfigurationError("dataset.cifar_train: required for dataset.kind=cifar10")
    if cfg.threads < 1:
        raise ConfigurationError("threads: must be >= 1")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    top: dict[str, Any] = {}
    train: dict[str, Any] = {}
    det: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        attr, parse = _KEYS[key]
        try:
            parsed = parse(value)
        except (ValueError, ConfigurationError) as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        if attr.startswith("train."):
            train[attr[6:]] = parsed
        elif attr.startswith("detector."):
            det[attr[9:]] = parsed
        else:
            top[attr] = parsed
    try:
        return ExperimentConfig(**top, train=TrainConfig(**train), detector=DetectorConfig(**det))
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), os.fspath(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, (attr, _) in _KEYS.items():
        obj: Any = cfg
        for part in attr.split("."):
            obj = getattr(obj, part)
        lines.append(f"{key}={_fmt(obj)}")
    return "\n".join(lines) + "\n"


DESK_PRESET = """\
# Desk-scale benchmark: 8-class Gaussian mixture, 4 leave-out splits.
name=desk
output_dir=runs/desk
seeds=0,1,2,3,4

dataset.kind=mixture
dataset.classes=8
dataset.dim=16
dataset.spread=0.25
dataset.radius=1.0
dataset.train_per_class=500
dataset.val_per_class=100
dataset.test_per_class=200
dataset.seed=100

partition.k=4
partition.mode=random
# neighbouring classes spread across splits; used by the split_type ablation
partition.groups=0,4;1,5;2,6;3,7

model.hidden=64,64

train.epochs=30
train.batch_size=100
train.momentum=0.9
train.weight_decay=0.0005
train.lr_start=0.1
train.lr_end=0.0001
train.margin=0.4
train.beta=1.0
train.delta=2.0
train.loss=MarginEntropy

detector.temperature=1000
detector.epsilon=0.002
detector.score=SoftmaxPlusEntropyAtTemp

eval.sets=uniform,gaussian,heldout_cluster,id_holdout
eval.count=1000
eval.seed=200

val_ood.kind=uniform
val_ood.count=500
val_ood.seed=210

ablate.splits=2,4,8
"""

PRESETS = {"desk": DESK_PRESET}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return parse_config(PRESETS[name], f"preset:{name}")
