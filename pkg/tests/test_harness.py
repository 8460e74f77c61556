import csv
import time
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

from looc import harness
from looc.cli import main
from looc.config import (
    EVAL_SET_NAMES,
    ExperimentConfig,
    dump_config,
    load_config,
    parse_config,
    preset,
)
from looc.errors import ConfigurationError
from looc.metrics import EvalReport

MINI = """\
dataset.classes=4
dataset.dim=4
dataset.train_per_class=60
dataset.val_per_class=20
dataset.test_per_class=40
partition.k=2
train.epochs=3
model.hidden=16
eval.count=120
val_ood.seed=210
seeds=0,1
"""


@pytest.fixture
def mini_cfg(tmp_path):
    path = tmp_path / "mini.cfg"
    path.write_text(MINI)
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    harness.run_train(parse_config(MINI), run)
    return run


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_round_trip(self):
        cfg = preset("desk")
        assert parse_config(dump_config(cfg)) == cfg

    def test_comments_and_blanks(self):
        cfg = parse_config("# c\n\npartition.k = 3  # trailing\n")
        assert cfg.k == 3

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigurationError, match=r"x\.cfg:2: unknown key 'bogus'"):
            parse_config("partition.k=2\nbogus=1\n", "x.cfg")

    def test_bad_value_reports_key(self):
        with pytest.raises(ConfigurationError, match=r":1: bad value for train.epochs"):
            parse_config("train.epochs=many\n")

    def test_k_above_n(self):
        with pytest.raises(ConfigurationError, match="K=9"):
            parse_config("dataset.classes=4\npartition.k=9\n")

    def test_validation_ood_must_differ(self):
        with pytest.raises(ConfigurationError, match="coincides"):
            ExperimentConfig(val_ood_kind="uniform", val_ood_seed=200)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="desk"):
            preset("nope")

    def test_load_file(self, mini_cfg):
        assert load_config(mini_cfg).classes == 4


class TestTrain:
    def test_artifacts(self, trained_run):
        names = {p.name for p in trained_run.iterdir()}
        assert {"config.snapshot", "part0.ckpt", "part1.ckpt", "train_log.csv"} <= names
        rows = read_csv(trained_run / "train_log.csv")
        assert len(rows) == 6 and set(rows[0]) == {
            "part_index", "epoch", "train_loss", "val_accuracy", "val_ood_error", "lr"
        }

    def test_rerun_identical(self, trained_run, tmp_path):
        harness.run_train(parse_config(MINI), tmp_path)
        for name in ("part0.ckpt", "part1.ckpt", "train_log.csv", "config.snapshot"):
            assert (tmp_path / name).read_bytes() == (trained_run / name).read_bytes()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(harness.RunError, match="cannot write"):
            harness.run_train(parse_config(MINI), blocker / "run")

    def test_snapshot_self_describing(self, trained_run):
        cfg, seed = harness.read_snapshot(trained_run)
        assert seed == 0 and cfg == parse_config(MINI)


class TestEval:
    def test_reload_equals_fresh(self, trained_run):
        cfg, _ = harness.read_snapshot(trained_run)
        fresh = harness.evaluate_ensemble(harness.load_ensemble(trained_run, 2), cfg, ["uniform"])
        report = harness.run_eval(trained_run, "uniform")
        assert report == next(iter(fresh.values()))[0]
        assert EvalReport.from_kv((trained_run / "report_uniform.kv").read_text()) == report

    def test_twice_identical(self, trained_run):
        harness.run_eval(trained_run, "gaussian")
        first = (trained_run / "scores_gaussian.csv").read_bytes()
        harness.run_eval(trained_run, "gaussian")
        assert (trained_run / "scores_gaussian.csv").read_bytes() == first

    def test_null_separation(self, trained_run):
        assert abs(harness.run_eval(trained_run, "id_holdout").auroc - 50) <= 3

    def test_score_dump(self, trained_run):
        harness.run_eval(trained_run, "heldout_cluster")
        rows = read_csv(trained_run / "scores_heldout_cluster.csv")
        assert [r["sample_id"] for r in rows] == [str(i) for i in range(len(rows))]
        assert sum(r["source"] == "id" for r in rows) == 160
        assert sum(r["source"] == "ood" for r in rows) == 120

    def test_unknown_set(self, trained_run):
        with pytest.raises(ConfigurationError, match="available: " + ", ".join(EVAL_SET_NAMES)):
            harness.run_eval(trained_run, "imagenet")

    def test_missing_checkpoint(self, trained_run, tmp_path):
        for name in ("config.snapshot", "part0.ckpt"):
            (tmp_path / name).write_bytes((trained_run / name).read_bytes())
        with pytest.raises(harness.RunError, match="part_index 1"):
            harness.run_eval(tmp_path, "uniform")


class TestAblate:
    def test_score_axis_reuses_checkpoints(self, trained_run):
        cfg = parse_config(MINI)
        harness.run_eval(trained_run, "uniform")
        t0 = time.perf_counter()
        harness.run_eval(trained_run, "uniform")
        single = time.perf_counter() - t0
        t0 = time.perf_counter()
        rows = harness.run_ablate(cfg, trained_run, "score", set_names=["uniform"])
        assert time.perf_counter() - t0 < 2 * single + 0.05
        assert [r[0] for r in rows] == [
            "Softmax", "Entropy", "SoftmaxPlusEntropy", "SoftmaxAtTemp", "EntropyAtTemp", "SoftmaxPlusEntropyAtTemp"
        ]

    def test_epsilon_keeps_accuracy(self, trained_run):
        rows = harness.run_ablate(parse_config(MINI), trained_run, "epsilon", set_names=["uniform"])
        assert len(rows) == 6
        assert len({r[2].cls_accuracy for r in rows}) == 1
        table = read_csv(trained_run / "ablation_epsilon.csv")
        assert [t["value"] for t in table] == ["0.0", "0.000313", "0.000625", "0.00125", "0.002", "0.003"]

    def test_loss_axis(self, tmp_path):
        rows = harness.run_ablate(parse_config(MINI), tmp_path, "loss", set_names=["uniform"])
        assert [r[0] for r in rows] == ["SFX", "MaxEntropyDiff", "MarginEntropy"]
        assert (tmp_path / "ablation_loss" / "SFX" / "part1.ckpt").exists()

    def test_splits_grid_filtered(self, tmp_path):
        cfg = replace(parse_config(MINI), ablate_splits=(2, 3, 10))
        rows = harness.run_ablate(cfg, tmp_path, "splits", set_names=["uniform"])
        assert [r[0] for r in rows] == ["2", "3"]

    def test_unknown_axis(self, trained_run):
        with pytest.raises(ConfigurationError, match="splits, split_type, epsilon"):
            harness.run_ablate(parse_config(MINI), trained_run, "depth")


class TestReport:
    def test_histograms(self, trained_run):
        harness.run_eval(trained_run, "uniform")
        harness.run_report(trained_run)
        rows = read_csv(trained_run / "hist_uniform.csv")
        assert len(rows) == harness.HIST_BINS
        assert sum(int(r["id_count"]) + int(r["ood_count"]) for r in rows) == 160 + 120
        first = (trained_run / "hist_uniform.csv").read_bytes()
        harness.run_report(trained_run)
        assert (trained_run / "hist_uniform.csv").read_bytes() == first

    def test_no_dumps(self, tmp_path):
        with pytest.raises(harness.RunError, match="no score dumps"):
            harness.run_report(tmp_path)

    def test_id_only_dump_warns(self, tmp_path, caplog):
        (tmp_path / "scores_x.csv").write_text(
            "sample_id,source,ood_score,predicted_class,true_class\n0,id,0.5,1,1\n1,id,0.7,0,0\n"
        )
        harness.run_report(tmp_path)
        assert "no OOD rows" in caplog.text
        rows = read_csv(tmp_path / "hist_x.csv")
        assert sum(int(r["id_count"]) for r in rows) == 2
        assert all(r["ood_count"] == "0" for r in rows)

    def test_histogram_edges(self):
        rows = harness.histogram_rows(np.array([0.0, 1.0]), np.array([0.5]), bins=4)
        assert [float(r[0]) for r in rows] == [0.0, 0.25, 0.5, 0.75]
        assert [r[2] + r[3] for r in rows] == [1, 0, 1, 1]


class TestMultiseed:
    def test_aggregates(self, tmp_path):
        cfg = replace(parse_config(MINI), eval_sets=("uniform",))
        agg = harness.run_multiseed(cfg, tmp_path)
        assert set(agg) == {"uniform"} and len(agg["uniform"]) == 6
        assert (tmp_path / "seed_0" / "part0.ckpt").exists() and (tmp_path / "seed_1").is_dir()
        swapped = harness.run_multiseed(replace(cfg, seeds=(1, 0)), tmp_path / "swapped")
        assert swapped == agg

    def test_single_seed_zero_std(self, tmp_path):
        cfg = replace(parse_config(MINI), eval_sets=("gaussian",), seeds=(3,))
        agg = harness.run_multiseed(cfg, tmp_path)
        assert all(sd == 0.0 for _, sd in agg["gaussian"].values())


class TestCli:
    def test_train_eval_report(self, mini_cfg, tmp_path):
        runner = CliRunner()
        run = str(tmp_path / "run")
        t0 = time.perf_counter()
        res = runner.invoke(main, ["train", "--config", str(mini_cfg), "--run-dir", run])
        assert res.exit_code == 0, res.output
        assert time.perf_counter() - t0 < 30
        assert "wrote 2 checkpoints" in res.output
        res = runner.invoke(main, ["eval", "--run-dir", run, "--set", "uniform", "--set", "gaussian"])
        assert res.exit_code == 0 and res.output.count("\n") == 3
        res = runner.invoke(main, ["report", "--run-dir", run])
        assert res.exit_code == 0 and "hist_gaussian.csv" in res.output

    def test_invalid_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("partition.k=2\nnope=1\n")
        res = CliRunner().invoke(main, ["train", "--config", str(bad), "--run-dir", str(tmp_path / "r")])
        assert res.exit_code != 0
        assert "bad.cfg:2" in res.output and "nope" in res.output
        assert not (tmp_path / "r").exists()

    def test_threads_env_fallback(self, mini_cfg, tmp_path, monkeypatch):
        calls = {}

        def fake(cfg, run_dir, seed, workers):
            calls["workers"] = workers
            return []

        monkeypatch.setattr(harness, "run_train", fake)
        monkeypatch.setenv("LOOC_THREADS", "3")
        runner = CliRunner()
        runner.invoke(main, ["train", "--config", str(mini_cfg), "--run-dir", str(tmp_path)])
        assert calls["workers"] == 3
        runner.invoke(main, ["train", "--config", str(mini_cfg), "--run-dir", str(tmp_path), "--threads", "2"])
        assert calls["workers"] == 2
        monkeypatch.setenv("LOOC_THREADS", "zero")
        res = runner.invoke(main, ["train", "--config", str(mini_cfg), "--run-dir", str(tmp_path)])
        assert res.exit_code != 0 and "LOOC_THREADS" in res.output

    def test_unknown_axis(self, mini_cfg, tmp_path):
        res = CliRunner().invoke(main, ["ablate", "--config", str(mini_cfg), "--axis", "x", "--run-dir", str(tmp_path)])
        assert res.exit_code != 0 and "split_type" in res.output

    def test_preset_listing(self):
        res = CliRunner().invoke(main, ["preset", "desk"])
        assert res.exit_code == 0 and "partition.k=4" in res.output
