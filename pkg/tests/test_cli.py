import csv
import filecmp

import numpy as np
import pytest

from freqd import cli
from freqd.data import load_split, synthetic_interactions, write_interactions
from freqd.distill import DistillConfig, fitnet_loss, fitnet_train, Projector
from freqd.graphcore import identity_filter
from freqd.recmodels import init_model, load_checkpoint, save_checkpoint
from freqd.training import TrainConfig

TRAIN_FLAGS = ["--lr", "0.01", "--batch-size", "128", "--max-epochs", "4", "--patience", "4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw.tsv"
    write_interactions(raw, synthetic_interactions(n_users=40, n_items=50, per_user=(12, 20), seed=2))
    assert run("prepare", raw, "--out", root / "split", "--threshold", 3) == 0
    assert run("train-teacher", "--split", root / "split", "--out", root / "teacher",
               "--dim", 16, "--seed", 0, *TRAIN_FLAGS) == 0
    return root


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPrepare:
    def test_outputs(self, workspace, capsys):
        for name in ("train.tsv", "val.tsv", "test.tsv", "mapping.tsv", "config.txt"):
            assert (workspace / "split" / name).exists()
        split = load_split(workspace / "split")
        assert split.n_users == 40

    def test_rerun_identical(self, workspace, capsys):
        assert run("prepare", workspace / "raw.tsv", "--out", workspace / "split2",
                   "--threshold", 3) == 0
        out = capsys.readouterr().out
        assert "users" in out and "sparsity" in out
        for name in ("train.tsv", "val.tsv", "test.tsv", "mapping.tsv"):
            assert filecmp.cmp(workspace / "split" / name, workspace / "split2" / name,
                               shallow=False)

    def test_empty_file(self, tmp_path, capsys):
        empty = tmp_path / "empty.tsv"
        empty.write_text("")
        assert run("prepare", empty, "--out", tmp_path / "out") == 1
        assert "EmptyFile" in capsys.readouterr().err

    def test_parse_error_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.tsv"
        bad.write_text("a\tb\t1\nc\n")
        assert run("prepare", bad, "--out", tmp_path / "out") == 1
        assert "line 2" in capsys.readouterr().err


class TestTrain:
    def test_teacher_outputs(self, workspace):
        out = workspace / "teacher"
        for name in ("config.txt", "log.csv", "metrics.csv", "model.ckpt"):
            assert (out / name).exists()
        config = (out / "config.txt").read_text()
        assert config.startswith("version=") and "dim=16" in config
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "metric,N,value" and len(lines) == 5

    def test_loss_decreases(self, workspace):
        out = workspace / "smoke"
        assert run("train-teacher", "--split", workspace / "split", "--out", out, "--dim", 8,
                   "--lr", "0.01", "--batch-size", 64, "--max-epochs", 10, "--patience", 10) == 0
        losses = [float(r["base_loss"]) for r in read_log(out / "log.csv")]
        assert len(losses) == 10 and losses[-1] < losses[0]

    def test_single_epoch(self, workspace):
        out = workspace / "one"
        assert run("train-student", "--split", workspace / "split", "--out", out,
                   "--patience", 1, "--max-epochs", 1) == 0
        assert len(read_log(out / "log.csv")) == 1

    def test_seed_reproducible(self, workspace):
        for name in ("r1", "r2"):
            assert run("train-student", "--split", workspace / "split", "--out", workspace / name,
                       "--seed", 3, *TRAIN_FLAGS) == 0
        assert filecmp.cmp(workspace / "r1" / "model.ckpt", workspace / "r2" / "model.ckpt",
                           shallow=False)


class TestDistill:
    def test_beta_zero_is_plain_student(self, workspace):
        split = workspace / "split"
        teacher = workspace / "teacher" / "model.ckpt"
        assert run("train-student", "--split", split, "--out", workspace / "plain",
                   "--seed", 4, *TRAIN_FLAGS) == 0
        assert run("distill", "--split", split, "--out", workspace / "b0", "--teacher", teacher,
                   "--beta", 0, "--seed", 4, *TRAIN_FLAGS) == 0
        assert filecmp.cmp(workspace / "plain" / "model.ckpt", workspace / "b0" / "model.ckpt",
                           shallow=False)

    def test_identity_is_fitnet(self, workspace):
        split_dir = workspace / "split"
        teacher_path = workspace / "teacher" / "model.ckpt"
        assert run("distill", "--split", split_dir, "--out", workspace / "ident",
                   "--teacher", teacher_path, "--filter", "identity", "--seed", 5,
                   *TRAIN_FLAGS) == 0
        split = load_split(split_dir)
        teacher = load_checkpoint(teacher_path)
        train = TrainConfig(lr=0.01, batch_size=128, max_epochs=4, patience=4)
        ref = fitnet_train(teacher, split, DistillConfig(beta=0.1, filter=identity_filter(),
                                                         train=train), seed=5)
        got = load_checkpoint(workspace / "ident" / "model.ckpt")
        assert np.array_equal(got.user_emb, ref.student.user_emb)
        assert np.array_equal(got.item_emb, ref.student.item_emb)

    def test_defaults_recorded(self, workspace):
        assert run("distill", "--split", workspace / "split", "--out", workspace / "dflt",
                   "--teacher", workspace / "teacher" / "model.ckpt", *TRAIN_FLAGS) == 0
        config = (workspace / "dflt" / "config.txt").read_text()
        assert "filter=linear:0.45" in config and "beta=0.1" in config
        assert (workspace / "dflt" / "projector.npz").exists()

    def test_bipartite_flag(self, workspace):
        assert run("distill", "--split", workspace / "split", "--out", workspace / "bip",
                   "--teacher", workspace / "teacher" / "model.ckpt", "--graph", "bipartite",
                   "--loss-scope", "full", *TRAIN_FLAGS) == 0

    def test_feature_norm_flag(self, workspace):
        assert run("distill", "--split", workspace / "split", "--out", workspace / "rows",
                   "--teacher", workspace / "teacher" / "model.ckpt", "--feature-norm", "rows",
                   *TRAIN_FLAGS) == 0
        assert "feature_norm=rows" in (workspace / "rows" / "config.txt").read_text()

    def test_teacher_shape_mismatch(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        save_checkpoint(bad, init_model(3, 4, 16, rng=0))
        assert run("distill", "--split", workspace / "split", "--out", tmp_path / "o",
                   "--teacher", bad, *TRAIN_FLAGS) == 1
        assert "DimensionMismatch" in capsys.readouterr().err

    def test_bad_filter_is_usage_error(self, workspace, tmp_path):
        assert run("distill", "--split", workspace / "split", "--out", tmp_path / "o",
                   "--teacher", workspace / "teacher" / "model.ckpt",
                   "--filter", "linear:0.9") == 2


class TestVerify:
    def test_pass(self, capsys):
        assert run("verify", "--n", 16, "--trials", 50, "--seed", 1) == 0
        report = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
        assert report["status"] == "pass"
        for name in ("theorem1", "theorem2", "theorem3"):
            assert float(report[f"{name}_max_rel_err"]) <= 1e-8

    def test_too_large(self, capsys):
        assert run("verify", "--n", 8192, "--trials", 1) == 1
        assert "TooLarge" in capsys.readouterr().err

    def test_zero_trials(self, capsys):
        assert run("verify", "--trials", 0) == 0
        captured = capsys.readouterr()
        assert "status=pass" in captured.out and "warning" in captured.err

    def test_theorem3_skipped_above_cap(self, capsys):
        assert run("verify", "--n", 80, "--trials", 1) == 0
        assert "theorem3=skipped" in capsys.readouterr().out


class TestSpectrum:
    def test_teacher_against_itself(self, workspace):
        teacher = workspace / "teacher" / "model.ckpt"
        out = workspace / "spec_self"
        assert run("spectrum", "--split", workspace / "split", "--student", teacher,
                   "--teacher", teacher, "--out", out) == 0
        rows = list(csv.DictReader(open(out / "spectrum.csv")))
        assert [(r["graph"], r["group"]) for r in rows] == [
            (g, str(k)) for g in ("user", "item") for k in range(1, 5)]
        assert all(float(r["loss"]) < 1e-12 for r in rows)

    def test_groups_sum_to_fitnet_loss(self, workspace, rng):
        split = load_split(workspace / "split")
        teacher = load_checkpoint(workspace / "teacher" / "model.ckpt")
        student = init_model(split.n_users, split.n_items, 8, rng=1, std=0.1)
        proj = {"proj_users": rng.normal(size=(8, 16)), "proj_items": rng.normal(size=(8, 16))}
        rows = cli.spectrum_rows(student, teacher, proj)
        total_user = sum(loss for g, _, loss in rows if g == "user")
        expected = fitnet_loss(student.user_emb, teacher.user_emb, Projector(proj["proj_users"]))
        assert total_user == pytest.approx(expected, rel=1e-9)


class TestEvaluate:
    def test_metrics_file(self, workspace):
        out = workspace / "eval"
        assert run("evaluate", "--ckpt", workspace / "teacher" / "model.ckpt",
                   "--split", workspace / "split", "--out", out) == 0
        assert (out / "metrics.csv").read_text() == (workspace / "teacher" / "metrics.csv").read_text()


class TestConfig:
    def test_config_file_and_override(self, workspace):
        cfg = workspace / "run.cfg"
        cfg.write_text(f"# student run\nsplit={workspace / 'split'}\nmax_epochs=2\n"
                       "patience=2\nlr=0.01\nbatch-size=128\n")
        out = workspace / "cfgrun"
        assert run("train-student", "--config", cfg, "--out", out, "--max-epochs", 1) == 0
        assert len(read_log(out / "log.csv")) == 1
        assert "lr=0.01" in (out / "config.txt").read_text()

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("trials=2\nbogus=1\n")
        assert run("verify", "--config", cfg) == 2
        assert "bogus" in capsys.readouterr().err

    def test_usage_errors(self):
        assert run() == 2
        assert run("nonsense") == 2
        assert run("verify", "--n", "many") == 2


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("FREQD_THREADS", "1")
    assert run("verify", "--n", 8, "--trials", 2) == 0
