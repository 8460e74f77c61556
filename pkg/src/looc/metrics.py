"""OOD detection metrics over ID (positive) and OOD (negative) scores.

All metrics use the rule ``score >= threshold`` means "accepted as ID" and
sweep every distinct score, plus a +inf sentinel that accepts nothing.
Results are percentages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from looc import kernels
from looc.errors import DomainError

METRIC_NAMES = ("fpr_at_95_tpr", "detection_error", "auroc", "aupr_in", "aupr_out", "cls_accuracy")


def _scores(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError(f"{what} scores are empty")
    if not np.isfinite(arr).all():
        raise DomainError(f"{what} scores contain non-finite values")
    return arr


def roc_counts(pos_scores, neg_scores) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Cumulative (TP, FP) per distinct threshold, highest threshold first."""
    pos = _scores(pos_scores, "positive")
    neg = _scores(neg_scores, "negative")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    tp, fp = kernels.threshold_counts(scores[order], is_pos[order])
    return tp, fp, pos.size, neg.size


def fpr_at_95_tpr(id_scores, ood_scores) -> float:
    """Smallest FPR over thresholds whose TPR is at least 95%."""
    tp, fp, n_pos, n_neg = roc_counts(id_scores, ood_scores)
    ok = 20 * tp >= 19 * n_pos
    return float(100.0 * fp[ok].min() / n_neg)


def detection_error(id_scores, ood_scores) -> float:
    """Minimum of 0.5 * (1 - TPR) + 0.5 * FPR over all thresholds."""
    tp, fp, n_pos, n_neg = roc_counts(id_scores, ood_scores)
    err = 0.5 * (1.0 - tp / n_pos) + 0.5 * (fp / n_neg)
    return float(100.0 * err.min())


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney form: P(id > ood) + 0.5 P(id == ood)."""
    tp, fp, n_pos, n_neg = roc_counts(id_scores, ood_scores)
    d_tp, d_fp = np.diff(tp), np.diff(fp)
    # each new negative outranks nothing already accepted; ties count half
    wins2 = (d_fp * (2 * tp[:-1] + d_tp)).sum()
    return float(100.0 * (wins2 / 2) / (n_pos * n_neg))


def aupr(pos_scores, neg_scores) -> float:
    """Average precision: sum of recall increments times precision."""
    tp, fp, n_pos, _ = roc_counts(pos_scores, neg_scores)
    tp, fp = tp[1:], fp[1:]
    d_tp = np.diff(np.r_[0, tp])
    return 100.0 * float((d_tp / n_pos * (tp / (tp + fp))).sum())


def aupr_in(id_scores, ood_scores) -> float:
    return aupr(id_scores, ood_scores)


def aupr_out(id_scores, ood_scores) -> float:
    return aupr(-_scores(ood_scores, "ood"), -_scores(id_scores, "id"))


def cls_accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions).ravel()
    lab = np.asarray(labels).ravel()
    if pred.size != lab.size:
        raise DomainError(f"{pred.size} predictions for {lab.size} labels")
    if pred.size == 0:
        raise DomainError("no predictions")
    return 100.0 * float((pred == lab).mean())


@dataclass
class EvalReport:
    fpr_at_95_tpr: float
    detection_error: float
    auroc: float
    aupr_in: float
    aupr_out: float
    cls_accuracy: float
    n_id: int = 0
    n_ood: int = 0
    config: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, id_scores, ood_scores, predictions, labels, config=None) -> "EvalReport":
        return cls(
            fpr_at_95_tpr(id_scores, ood_scores),
            detection_error(id_scores, ood_scores),
            auroc(id_scores, ood_scores),
            aupr_in(id_scores, ood_scores),
            aupr_out(id_scores, ood_scores),
            cls_accuracy(predictions, labels),
            int(np.size(id_scores)),
            int(np.size(ood_scores)),
            dict(config or {}),
        )

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_kv(self) -> str:
        lines = [f"{k}={v!r}" for k, v in self.metrics().items()]
        lines += [f"n_id={self.n_id}", f"n_ood={self.n_ood}"]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "EvalReport":
        vals, config = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key.startswith("config."):
                config[key[len("config."):]] = value
            elif key in ("n_id", "n_ood"):
                vals[key] = int(value)
            else:
                vals[key] = float(value)
        return cls(**vals, config=config)

    CSV_HEADER = ",".join(METRIC_NAMES + ("n_id", "n_ood"))

    def to_csv_row(self) -> str:
        vals = [f"{v:.6f}" for v in self.metrics().values()]
        return ",".join(vals + [str(self.n_id), str(self.n_ood)])


def aggregate_runs(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Per-metric (mean, sample std); std is 0 for a single report."""
    if not reports:
        raise DomainError("nothing to aggregate")
    out = {}
    for name in METRIC_NAMES:
        vals = sorted(getattr(r, name) for r in reports)
        m = math.fsum(vals) / len(vals)
        sd = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        out[name] = (m, sd)
    return out
