"""Experiment orchestration: train, eval, ablate, report, multiseed.

A run directory is self-describing::

    config.snapshot     resolved configuration, including run.seed
    part{i}.ckpt        one checkpoint per leave-out classifier
    train_log.csv       per-epoch training log
    scores_{set}.csv    per-sample scores of the last eval of ``set``
    report_{set}.kv     EvalReport of that eval
    ablation_{axis}.csv ablation table
    hist_{set}.csv      score histograms
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from looc import data as D
from looc.config import EVAL_SET_NAMES, ExperimentConfig, dump_config, parse_config
from looc.detection import DetectorConfig, ScoreVariant, detect_variants_batched
from looc.errors import ConfigurationError, LoocError
from looc.metrics import METRIC_NAMES, EvalReport, aggregate_runs
from looc.model import MlpClassifier, load_checkpoint, save_checkpoint
from looc.training import LossVariant, TrainResult, train_baseline, train_ensemble

logger = logging.getLogger(__name__)

SNAPSHOT = "config.snapshot"
HIST_BINS = 50
ABLATION_AXES = ("splits", "split_type", "epsilon", "temperature", "loss", "score")
DETECTOR_AXES = ("epsilon", "temperature", "score")


class RunError(LoocError, RuntimeError):
    """A run directory is missing pieces or cannot be written."""


@dataclass
class Datasets:
    train: D.LabeledDataset
    val: D.LabeledDataset
    test: D.LabeledDataset
    val_ood: np.ndarray


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    s = cfg.data_seed
    if cfg.dataset_kind == "mixture":
        mk = lambda per, seed, name: D.synth_gaussian_mixture(  # noqa: E731
            cfg.classes, per, cfg.dim, cfg.spread, seed, cfg.radius, name
        )
        train = mk(cfg.train_per_class, s, "train")
        val = mk(cfg.val_per_class, s + 1, "val")
        test = mk(cfg.test_per_class, s + 2, "test")
    else:
        full = D.load_cifar10_binary(cfg.cifar_train)
        pool = D.stratified_subsample(full, cfg.subsample + cfg.subsample // 4, s)
        idx = np.random.default_rng(s + 1).permutation(len(pool))
        n_val = len(pool) - cfg.subsample if len(pool) > cfg.subsample else len(pool) // 5
        val, train = pool.subset(np.sort(idx[:n_val]), "val"), pool.subset(np.sort(idx[n_val:]), "train")
        if cfg.cifar_test:
            test = D.stratified_subsample(D.load_cifar10_binary(cfg.cifar_test), max(cfg.subsample // 4, 1), s + 2)
        else:
            test = val
    dim = train.dim
    noise = D.noise_uniform if cfg.val_ood_kind == "uniform" else D.noise_gaussian
    return Datasets(train, val, test, noise(cfg.val_ood_count, dim, cfg.val_ood_seed))


def eval_set(cfg: ExperimentConfig, name: str, dim: int) -> np.ndarray:
    if name not in EVAL_SET_NAMES:
        raise ConfigurationError(f"unknown eval set {name!r}; available: {', '.join(EVAL_SET_NAMES)}")
    seed = cfg.eval_set_seed(name)
    if name == "uniform":
        return D.noise_uniform(cfg.eval_count, dim, seed)
    if name == "gaussian":
        return D.noise_gaussian(cfg.eval_count, dim, seed)
    if cfg.dataset_kind != "mixture":
        raise ConfigurationError(f"eval set {name!r} is only defined for mixture datasets")
    if name == "heldout_cluster":
        # the next unused class slot of the mixture layout
        center = D.mixture_centers(cfg.classes + 1, cfg.dim, cfg.radius)[cfg.classes]
        return D.gaussian_blob(center, cfg.eval_count, cfg.spread, seed)
    per = max(cfg.eval_count // cfg.classes, 1)
    return D.synth_gaussian_mixture(cfg.classes, per, cfg.dim, cfg.spread, seed, cfg.radius).features


def make_partition(cfg: ExperimentConfig, seed: int, mode: str | None = None, k: int | None = None) -> D.ClassPartition:
    mode = mode or cfg.partition_mode
    n = 10 if cfg.dataset_kind == "cifar10" else cfg.classes
    if mode == "manual":
        return D.partition_manual(cfg.groups, n)
    return D.partition_random(n, k or cfg.k, seed)


# ---------------------------------------------------------------------------
# run directories


def read_snapshot(run_dir: str | os.PathLike) -> tuple[ExperimentConfig, int]:
    path = Path(run_dir) / SNAPSHOT
    if not path.exists():
        raise RunError(f"{run_dir}: no {SNAPSHOT}; not a run directory")
    lines, seed = [], None
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("run.seed="):
            seed = int(line.split("=", 1)[1])
        else:
            lines.append(line)
    cfg = parse_config("\n".join(lines), os.fspath(path))
    return cfg, (cfg.seeds[0] if seed is None else seed)


def write_snapshot(run_dir: Path, cfg: ExperimentConfig, seed: int) -> None:
    (run_dir / SNAPSHOT).write_text(dump_config(cfg) + f"run.seed={seed}\n", encoding="utf-8")


def load_ensemble(run_dir: str | os.PathLike, k: int) -> list[MlpClassifier]:
    models = []
    for i in range(k):
        path = Path(run_dir) / f"part{i}.ckpt"
        if not path.exists():
            raise RunError(f"{run_dir}: missing checkpoint for part_index {i} ({path.name})")
        models.append(load_checkpoint(path))
    return models


def _prepare_dir(run_dir: Path) -> Path:
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        probe = run_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise RunError(f"cannot write to run directory {run_dir}: {exc}") from exc
    return run_dir


def run_train(
    cfg: ExperimentConfig,
    run_dir: str | os.PathLike,
    seed: int | None = None,
    workers: int | None = None,
    partition: D.ClassPartition | None = None,
) -> list[TrainResult]:
    """Train the K leave-out classifiers of one seed and persist them."""
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = _prepare_dir(Path(run_dir))
    data = build_datasets(cfg)
    partition = partition or make_partition(cfg, seed)
    logger.info("training %d classifiers, partition %s", partition.k, partition.parts)
    results = train_ensemble(
        data.train, partition, data.val, data.val_ood, cfg.with_seed_train(seed), workers or cfg.threads
    )
    write_snapshot(run_dir, replace(cfg, k=partition.k), seed)
    for res in results:
        save_checkpoint(res.model, run_dir / f"part{res.model.part_index}.ckpt")
    with open(run_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["part_index", "epoch", "train_loss", "val_accuracy", "val_ood_error", "lr"])
        for res in results:
            for row in res.log_rows(res.model.part_index):
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
    return results


def _score_rows(id_res, ood_res, labels) -> list[list]:
    rows = []
    for j in range(len(id_res)):
        rows.append([j, "id", repr(float(id_res.ood_score[j])), int(id_res.predicted_class[j]), int(labels[j])])
    for j in range(len(ood_res)):
        rows.append([len(id_res) + j, "ood", repr(float(ood_res.ood_score[j])), int(ood_res.predicted_class[j]), ""])
    return rows


def _write_scores(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "source", "ood_score", "predicted_class", "true_class"])
        w.writerows(rows)


def evaluate_ensemble(
    ensemble: Sequence[MlpClassifier],
    cfg: ExperimentConfig,
    set_names: Sequence[str],
    detector: DetectorConfig | None = None,
    variants: Sequence | None = None,
) -> dict[tuple[str, ScoreVariant], tuple[EvalReport, list[list]]]:
    """Score the ID test set and each named OOD set, for several variants."""
    detector = detector or cfg.detector
    variants = [ScoreVariant.parse(v) for v in (variants or [detector.score_variant])]
    data = build_datasets(cfg)
    n = data.train.n_classes
    id_res = detect_variants_batched(ensemble, data.test.features, detector.temperature, detector.epsilon, n, variants)
    out = {}
    for name in set_names:
        x = eval_set(cfg, name, data.train.dim)
        ood_res = detect_variants_batched(ensemble, x, detector.temperature, detector.epsilon, n, variants)
        for v in variants:
            echo = {"set": name, "temperature": repr(detector.temperature), "epsilon": repr(detector.epsilon),
                    "score": v.value, "k": str(len(ensemble))}
            report = EvalReport.from_scores(
                id_res[v].ood_score, ood_res[v].ood_score, id_res[v].predicted_class, data.test.labels, echo
            )
            out[(name, v)] = (report, _score_rows(id_res[v], ood_res[v], data.test.labels))
    return out


def run_eval(run_dir: str | os.PathLike, set_name: str) -> EvalReport:
    run_dir = Path(run_dir)
    cfg, _ = read_snapshot(run_dir)
    if set_name not in EVAL_SET_NAMES:
        raise ConfigurationError(f"unknown eval set {set_name!r}; available: {', '.join(EVAL_SET_NAMES)}")
    ensemble = load_ensemble(run_dir, cfg.k)
    (report, rows), = evaluate_ensemble(ensemble, cfg, [set_name]).values()
    _write_scores(run_dir / f"scores_{set_name}.csv", rows)
    (run_dir / f"report_{set_name}.kv").write_text(report.to_kv(), encoding="utf-8")
    return report


def run_baseline(cfg: ExperimentConfig, run_dir: str | os.PathLike, seed: int | None = None) -> dict[str, EvalReport]:
    """Single all-class classifier scored by plain max softmax (T=1, no perturbation)."""
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = _prepare_dir(Path(run_dir))
    data = build_datasets(cfg)
    model = train_baseline(data.train, data.val, cfg.with_seed_train(seed))
    save_checkpoint(model, run_dir / "baseline.ckpt")
    det = DetectorConfig(1.0, 0.0, ScoreVariant.SOFTMAX)
    reports = {}
    for (name, _), (report, _) in evaluate_ensemble([model], cfg, cfg.eval_sets, det).items():
        (run_dir / f"report_baseline_{name}.kv").write_text(report.to_kv(), encoding="utf-8")
        reports[name] = report
    return reports


# ---------------------------------------------------------------------------
# ablation


def _ablation_grid(cfg: ExperimentConfig, axis: str) -> list:
    n = 10 if cfg.dataset_kind == "cifar10" else cfg.classes
    if axis == "splits":
        return [k for k in cfg.ablate_splits if 2 <= k <= n]
    if axis == "split_type":
        return ["random", "manual"] if cfg.groups else ["random"]
    if axis == "epsilon":
        return list(cfg.ablate_epsilons)
    if axis == "temperature":
        return list(cfg.ablate_temperatures)
    if axis == "loss":
        return list(LossVariant)
    if axis == "score":
        return list(ScoreVariant)
    raise ConfigurationError(f"unknown ablation axis {axis!r}; available: {', '.join(ABLATION_AXES)}")


def _value_label(value) -> str:
    return value.value if hasattr(value, "value") else str(value)


def ensure_trained(cfg: ExperimentConfig, run_dir: Path, seed: int, workers: int | None) -> list[MlpClassifier]:
    if (run_dir / SNAPSHOT).exists():
        snap_cfg, _ = read_snapshot(run_dir)
        try:
            return load_ensemble(run_dir, snap_cfg.k)
        except RunError:
            pass
    run_train(cfg, run_dir, seed, workers)
    return load_ensemble(run_dir, read_snapshot(run_dir)[0].k)


def run_ablate(
    cfg: ExperimentConfig,
    run_dir: str | os.PathLike,
    axis: str,
    seed: int | None = None,
    workers: int | None = None,
    set_names: Sequence[str] | None = None,
) -> list[tuple[str, str, EvalReport]]:
    """One row per (grid value, eval set); written to ``ablation_{axis}.csv``."""
    grid = _ablation_grid(cfg, axis)
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = _prepare_dir(Path(run_dir))
    set_names = list(set_names or cfg.eval_sets)
    rows: list[tuple[str, str, EvalReport]] = []

    if axis in DETECTOR_AXES:
        ensemble = ensure_trained(cfg, run_dir, seed, workers)
        if axis == "score":
            results = evaluate_ensemble(ensemble, cfg, set_names, cfg.detector, grid)
            for v in grid:
                rows += [(v.value, s, results[(s, v)][0]) for s in set_names]
        else:
            for value in grid:
                field_name = "epsilon" if axis == "epsilon" else "temperature"
                det = replace(cfg.detector, **{field_name: float(value)})
                results = evaluate_ensemble(ensemble, cfg, set_names, det)
                rows += [(repr(float(value)), s, results[(s, det.score_variant)][0]) for s in set_names]
    else:
        for value in grid:
            sub = run_dir / f"ablation_{axis}" / _value_label(value)
            sub_cfg, partition = cfg, None
            if axis == "splits":
                sub_cfg = replace(cfg, k=int(value), partition_mode="random")
            elif axis == "split_type":
                sub_cfg = replace(cfg, partition_mode=value)
            elif axis == "loss":
                sub_cfg = replace(cfg, train=replace(cfg.train, loss_variant=value))
            run_train(sub_cfg, sub, seed, workers, partition)
            ensemble = load_ensemble(sub, read_snapshot(sub)[0].k)
            results = evaluate_ensemble(ensemble, sub_cfg, set_names)
            rows += [(_value_label(value), s, results[(s, sub_cfg.detector.score_variant)][0]) for s in set_names]

    with open(run_dir / f"ablation_{axis}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "eval_set", *METRIC_NAMES, "n_id", "n_ood"])
        for value, s, rep in rows:
            w.writerow([axis, value, s, *(f"{m:.6f}" for m in rep.metrics().values()), rep.n_id, rep.n_ood])
    return rows


# ---------------------------------------------------------------------------
# histograms and multi-seed aggregation


def histogram_rows(id_scores: np.ndarray, ood_scores: np.ndarray, bins: int = HIST_BINS) -> list[tuple]:
    both = np.concatenate([id_scores, ood_scores])
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(id_scores, edges)
    ood_counts, _ = np.histogram(ood_scores, edges)
    return [(repr(float(edges[b])), repr(float(edges[b + 1])), int(id_counts[b]), int(ood_counts[b])) for b in range(bins)]


def run_report(run_dir: str | os.PathLike) -> list[Path]:
    run_dir = Path(run_dir)
    dumps = sorted(run_dir.glob("scores_*.csv"))
    if not dumps:
        raise RunError(f"{run_dir}: no score dumps (scores_*.csv); run eval first")
    written = []
    for dump in dumps:
        set_name = dump.stem[len("scores_"):]
        id_s, ood_s = [], []
        with open(dump, newline="") as fh:
            for row in csv.DictReader(fh):
                (id_s if row["source"] == "id" else ood_s).append(float(row["ood_score"]))
        if not id_s and not ood_s:
            logger.warning("%s is empty; skipped", dump.name)
            continue
        if not ood_s:
            logger.warning("%s has no OOD rows; writing an ID-only histogram", dump.name)
        rows = histogram_rows(np.asarray(id_s), np.asarray(ood_s))
        out = run_dir / f"hist_{set_name}.csv"
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "id_count", "ood_count"])
            w.writerows(rows)
        written.append(out)
    return written


def run_multiseed(
    cfg: ExperimentConfig, out_dir: str | os.PathLike, workers: int | None = None
) -> dict[str, dict[str, tuple[float, float]]]:
    """Train and evaluate once per seed, then aggregate mean/std per eval set."""
    out_dir = _prepare_dir(Path(out_dir))
    per_set: dict[str, list[EvalReport]] = {s: [] for s in cfg.eval_sets}
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        run_train(cfg, seed_dir, seed, workers)
        for s in cfg.eval_sets:
            per_set[s].append(run_eval(seed_dir, s))
    agg = {s: aggregate_runs(reps) for s, reps in per_set.items()}
    with open(out_dir / "multiseed.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eval_set", "metric", "mean", "std", "n_seeds"])
        for s, stats in agg.items():
            for metric, (m, sd) in stats.items():
                w.writerow([s, metric, f"{m:.6f}", f"{sd:.6f}", len(cfg.seeds)])
    return agg
