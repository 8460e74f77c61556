"""Command-line entry point (``looc``)."""

from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click

from looc import harness
from looc.config import PRESETS, ExperimentConfig, load_config, preset
from looc.errors import LoocError

THREADS_ENV = "LOOC_THREADS"


def _load(spec: str) -> ExperimentConfig:
    if spec.startswith("preset:"):
        return preset(spec[len("preset:"):])
    return load_config(spec)


def _threads(value: int | None) -> int | None:
    if value is not None:
        return value
    env = os.environ.get(THREADS_ENV)
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise click.UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise click.UsageError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (LoocError, OSError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


config_opt = click.option(
    "--config", "config_spec", required=True, metavar="PATH",
    help="Config file, or preset:NAME for a bundled preset.",
)
threads_opt = click.option(
    "--threads", type=click.IntRange(min=1), default=None,
    help=f"Worker processes (falls back to ${THREADS_ENV}, then the config).",
)
seed_opt = click.option("--seed", type=int, default=None, help="Run seed (default: first configured seed).")


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Leave-out ensemble OOD detection experiments."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@config_opt
@click.option("--run-dir", type=click.Path(file_okay=False), default=None, help="Defaults to output_dir.")
@seed_opt
@threads_opt
@_guard
def train(config_spec, run_dir, seed, threads):
    """Train the K leave-out classifiers."""
    cfg = _load(config_spec)
    run_dir = run_dir or cfg.output_dir
    results = harness.run_train(cfg, run_dir, seed, _threads(threads))
    for res in results:
        sel = res.selected
        click.echo(
            f"part {res.model.part_index}: epoch {sel.epoch} "
            f"acc={sel.accuracy:.2f} ood_error={sel.ood_error:.2f}"
        )
    click.echo(f"wrote {len(results)} checkpoints to {run_dir}")


@main.command("eval")
@click.option("--run-dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--set", "set_names", multiple=True, required=True, metavar="NAME", help="Eval set; repeatable.")
@_guard
def eval_(run_dir, set_names):
    """Score the ID test set against a named OOD set."""
    click.echo(f"eval_set,{harness.EvalReport.CSV_HEADER}")
    for name in set_names:
        report = harness.run_eval(run_dir, name)
        click.echo(f"{name},{report.to_csv_row()}")


@main.command()
@config_opt
@click.option("--axis", required=True, metavar="NAME", help=f"One of: {', '.join(harness.ABLATION_AXES)}.")
@click.option("--run-dir", type=click.Path(file_okay=False), default=None)
@click.option("--set", "set_names", multiple=True, metavar="NAME", help="Restrict to these eval sets.")
@seed_opt
@threads_opt
@_guard
def ablate(config_spec, axis, run_dir, set_names, seed, threads):
    """Sweep one ablation axis and write ablation_{axis}.csv."""
    cfg = _load(config_spec)
    run_dir = run_dir or cfg.output_dir
    rows = harness.run_ablate(cfg, run_dir, axis, seed, _threads(threads), set_names or None)
    click.echo(f"value,eval_set,{harness.EvalReport.CSV_HEADER}")
    for value, name, report in rows:
        click.echo(f"{value},{name},{report.to_csv_row()}")


@main.command()
@click.option("--run-dir", type=click.Path(file_okay=False, exists=True), required=True)
@_guard
def report(run_dir):
    """Write hist_{set}.csv for every score dump in a run."""
    for path in harness.run_report(run_dir):
        click.echo(f"wrote {path}")


@main.command()
@config_opt
@click.option("--run-dir", type=click.Path(file_okay=False), default=None, help="Defaults to output_dir.")
@threads_opt
@_guard
def multiseed(config_spec, run_dir, threads):
    """Train and evaluate every configured seed, then aggregate."""
    cfg = _load(config_spec)
    out = run_dir or cfg.output_dir
    agg = harness.run_multiseed(cfg, out, _threads(threads))
    click.echo("eval_set,metric,mean,std")
    for name, stats in agg.items():
        for metric, (m, sd) in stats.items():
            click.echo(f"{name},{metric},{m:.4f},{sd:.4f}")
    click.echo(f"wrote {Path(out) / 'multiseed.csv'}")


@main.command()
@config_opt
@click.option("--run-dir", type=click.Path(file_okay=False), required=True)
@seed_opt
@_guard
def baseline(config_spec, run_dir, seed):
    """Train one all-class classifier and score it with plain max softmax."""
    cfg = _load(config_spec)
    reports = harness.run_baseline(cfg, run_dir, seed)
    click.echo(f"eval_set,{harness.EvalReport.CSV_HEADER}")
    for name, rep in reports.items():
        click.echo(f"{name},{rep.to_csv_row()}")


@main.command("preset")
@click.argument("name", required=False)
def show_preset(name):
    """Print a bundled preset (or list them)."""
    if name is None:
        click.echo("\n".join(PRESETS))
    elif name not in PRESETS:
        raise click.ClickException(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    else:
        click.echo(PRESETS[name], nl=False)


if __name__ == "__main__":
    main()
