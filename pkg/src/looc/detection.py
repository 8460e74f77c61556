"""Ensemble OOD scoring with entropy-gradient input perturbation."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from looc.errors import ConfigurationError, DimensionError, DomainError, ValidationError
from looc.model import MlpClassifier, expand_to_global, predict_probs
from looc.tensor import Tensor, entropy, total


class ScoreVariant(str, enum.Enum):
    SOFTMAX = "Softmax"
    ENTROPY = "Entropy"
    SOFTMAX_PLUS_ENTROPY = "SoftmaxPlusEntropy"
    SOFTMAX_AT_TEMP = "SoftmaxAtTemp"
    ENTROPY_AT_TEMP = "EntropyAtTemp"
    SOFTMAX_PLUS_ENTROPY_AT_TEMP = "SoftmaxPlusEntropyAtTemp"

    @property
    def at_temperature(self) -> bool:
        return self.value.endswith("AtTemp")

    @property
    def uses_softmax(self) -> bool:
        return self.value.startswith("Softmax")

    @property
    def uses_entropy(self) -> bool:
        return "Entropy" in self.value

    @classmethod
    def parse(cls, value) -> "ScoreVariant":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown score variant {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class DetectorConfig:
    temperature: float = 1000.0
    epsilon: float = 0.002
    score_variant: ScoreVariant = ScoreVariant.SOFTMAX_PLUS_ENTROPY_AT_TEMP

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if not self.epsilon >= 0:
            raise DomainError(f"epsilon must be non-negative, got {self.epsilon}")
        object.__setattr__(self, "score_variant", ScoreVariant.parse(self.score_variant))


@dataclass
class DetectionResult:
    """Batch output: one entry (row) per input sample."""

    predicted_class: np.ndarray
    ood_score: np.ndarray
    per_classifier_scores: np.ndarray
    class_scores: np.ndarray

    def __len__(self) -> int:
        return self.predicted_class.shape[0]


def perturb_input(model: MlpClassifier, x, epsilon: float, temperature: float) -> np.ndarray:
    """One signed-gradient step that lowers the at-temperature entropy.

    ``x_hat = x - epsilon * sign(dH/dx)``, no clamping to the data range.
    """
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    xt = Tensor(x.copy(), requires_grad=True)
    h = entropy(predict_probs(model, xt, temperature))
    total(h).backward()
    return x - epsilon * np.sign(xt.grad)


def classifier_ood_score(model: MlpClassifier, x, temperature: float, variant) -> np.ndarray:
    """Max softmax and/or negated entropy of one classifier's local head."""
    variant = ScoreVariant.parse(variant)
    t = temperature if variant.at_temperature else 1.0
    p = predict_probs(model, x, t)
    score = np.zeros(p.shape[0])
    if variant.uses_softmax:
        score += p.data.max(axis=1)
    if variant.uses_entropy:
        score -= entropy(p).data
    return score


def check_ensemble(ensemble: Sequence[MlpClassifier], n_classes: int) -> None:
    """Each class must be left out by exactly one classifier (or by none when K=1)."""
    if not ensemble:
        raise ValidationError("empty ensemble")
    widths = {m.d_in for m in ensemble}
    if len(widths) != 1:
        raise ValidationError(f"classifiers disagree on input width: {sorted(widths)}")
    k = len(ensemble)
    coverage = np.zeros(n_classes, dtype=np.int64)
    for m in ensemble:
        if m.n_classes != n_classes:
            raise ValidationError(f"classifier {m.part_index} is built for {m.n_classes} classes, not {n_classes}")
        coverage[list(m.local_map)] += 1
    expected = k if k == 1 else k - 1
    bad = np.flatnonzero(coverage != expected)
    if bad.size:
        raise ValidationError(
            f"class coverage inconsistent with a partition: classes {bad.tolist()} are retained by "
            f"{coverage[bad].tolist()} classifiers, expected {expected}"
        )


def _check_input(ensemble, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != ensemble[0].d_in:
        raise DimensionError(f"input shape {x.shape} does not match ensemble input width {ensemble[0].d_in}")
    return x


def detect(ensemble: Sequence[MlpClassifier], x, cfg: DetectorConfig, n_classes: int) -> DetectionResult:
    return detect_variants(ensemble, x, cfg.temperature, cfg.epsilon, n_classes, [cfg.score_variant])[cfg.score_variant]


def detect_variants(
    ensemble: Sequence[MlpClassifier],
    x,
    temperature: float,
    epsilon: float,
    n_classes: int,
    variants: Sequence,
) -> dict[ScoreVariant, DetectionResult]:
    """Score several variants sharing one perturbation pass per classifier.

    Class evidence sums the zero-expanded T=1 softmax of the unperturbed
    input; OOD evidence sums each classifier's score on its own perturbed
    input.
    """
    check_ensemble(ensemble, n_classes)
    DetectorConfig(temperature, epsilon)
    variants = [ScoreVariant.parse(v) for v in variants]
    x = _check_input(ensemble, x)
    class_scores = np.zeros((x.shape[0], n_classes))
    per_clf = {v: np.zeros((x.shape[0], len(ensemble))) for v in variants}
    for i, model in enumerate(ensemble):
        class_scores += expand_to_global(predict_probs(model, x, 1.0), model.local_map, n_classes)
        x_hat = perturb_input(model, x, epsilon, temperature)
        for v in variants:
            per_clf[v][:, i] = classifier_ood_score(model, x_hat, temperature, v)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    predicted = class_scores.argmax(axis=1)
    return {v: DetectionResult(predicted, s.sum(axis=1), s, class_scores) for v, s in per_clf.items()}


def detect_batched(ensemble, x, cfg: DetectorConfig, n_classes: int, batch_size: int = 1000) -> DetectionResult:
    """``detect`` over fixed-size chunks; results do not depend on chunking."""
    return detect_variants_batched(
        ensemble, x, cfg.temperature, cfg.epsilon, n_classes, [cfg.score_variant], batch_size
    )[cfg.score_variant]


def detect_variants_batched(ensemble, x, temperature, epsilon, n_classes, variants, batch_size: int = 1000):
    x = np.asarray(x, dtype=np.float64)
    chunks = [
        detect_variants(ensemble, x[s:s + batch_size], temperature, epsilon, n_classes, variants)
        for s in range(0, max(len(x), 1), batch_size)
    ]
    out = {}
    for v in chunks[0]:
        parts = [c[v] for c in chunks]
        out[v] = DetectionResult(
            np.concatenate([p.predicted_class for p in parts]),
            np.concatenate([p.ood_score for p in parts]),
            np.concatenate([p.per_classifier_scores for p in parts]),
            np.concatenate([p.class_scores for p in parts]),
        )
    return out
