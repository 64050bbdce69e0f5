import csv
import json

import pytest
from numpy.testing import assert_array_equal
from typer.testing import CliRunner

from omniview_tuning import config
from omniview_tuning.__main__ import COMMAND_HANDLERS, app
from omniview_tuning.services.experiment import load_experiment
from omniview_tuning.services.model import load_checkpoint
from omniview_tuning.services.trainer import build_model


runner = CliRunner()


def invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def csv_rows(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def generated(smoke_config, tmp_path):
    result = invoke("gen", "--config", smoke_config, "--out", tmp_path)
    assert result.exit_code == 0, result.output
    return tmp_path


def test_registers_every_command():
    assert set(COMMAND_HANDLERS) == {"gen", "train", "eval", "gradcheck", "compare", "ablate"}


class TestGen:
    def test_writes_three_files(self, generated):
        for name in (config.MULTIVIEW_FILE, config.CLEAN_FILE, config.EVAL_FILE):
            assert (generated / name).is_file()

    def test_rerun_is_byte_identical(self, generated, smoke_config, tmp_path):
        other = tmp_path / "again"
        assert invoke("gen", "--config", smoke_config, "--out", other).exit_code == 0
        for name in (config.MULTIVIEW_FILE, config.CLEAN_FILE, config.EVAL_FILE):
            assert (generated / name).read_bytes() == (other / name).read_bytes()

    def test_unknown_key(self, smoke_config, tmp_path):
        result = invoke("gen", "--config", smoke_config, "--out", tmp_path, "--set", "gen.bogus=1")
        assert result.exit_code == 1
        assert "gen.bogus" in result.output

    def test_missing_config(self, tmp_path):
        result = invoke("gen", "--config", tmp_path / "absent.json", "--out", tmp_path)
        assert result.exit_code == 1


class TestTrain:
    def test_metrics_and_checkpoint(self, generated, smoke_config):
        result = invoke("train", "--config", smoke_config, "--out", generated)
        assert result.exit_code == 0, result.output
        rows = csv_rows(generated / config.METRICS_FILE)
        assert [row["epoch"] for row in rows] == ["0", "1", "2"]
        assert list(rows[0]) == list(config.METRICS_COLUMNS)
        assert all(row["seconds"] == "" for row in rows)
        assert (generated / config.CHECKPOINT_FILE).is_file()
        resolved = json.loads((generated / config.RESOLVED_CONFIG_FILE).read_text())
        assert resolved["train"]["epochs"] == 2

    def test_rerun_is_byte_identical(self, generated, smoke_config, tmp_path):
        other = tmp_path / "again"
        for out in (generated, other):
            result = invoke("train", "--config", smoke_config, "--out", out, "--data", generated)
            assert result.exit_code == 0, result.output
        for name in (config.METRICS_FILE, config.CHECKPOINT_FILE):
            assert (generated / name).read_bytes() == (other / name).read_bytes()

    def test_zero_rate_keeps_initial_trainables(self, generated, smoke_config):
        overrides = ("--set", "train.learning_rate=0", "--set", "train.pretrain_epochs=0")
        result = invoke("train", "--config", smoke_config, "--out", generated, *overrides)
        assert result.exit_code == 0, result.output
        experiment = load_experiment(smoke_config, ["train.learning_rate=0", "train.pretrain_epochs=0"])
        initial = build_model(experiment.train, experiment.gen.input_dim)
        trained = load_checkpoint(generated / config.CHECKPOINT_FILE)
        for name, value in initial.trainable_parameters().items():
            assert_array_equal(trained.trainable_parameters()[name], value)

    def test_random_outlier_sampling(self, generated, smoke_config):
        result = invoke(
            "train", "--config", smoke_config, "--out", generated, "--set", "train.sampling_mode=ros"
        )
        assert result.exit_code == 0, result.output
        assert "ros" in result.output

    def test_without_data(self, smoke_config, tmp_path):
        result = invoke("train", "--config", smoke_config, "--out", tmp_path)
        assert result.exit_code == 1
        assert "gen" in result.output


class TestEval:
    def test_report(self, generated, smoke_config):
        assert invoke("train", "--config", smoke_config, "--out", generated).exit_code == 0
        result = invoke("eval", "--config", smoke_config, "--out", generated)
        assert result.exit_code == 0, result.output
        report = json.loads((generated / config.REPORT_FILE).read_text())
        assert set(report["zero_shot"]["all"]) == {"top1", "top2"}

    def test_missing_checkpoint(self, generated, smoke_config):
        result = invoke("eval", "--config", smoke_config, "--out", generated)
        assert result.exit_code == 1


class TestGradcheck:
    def test_passes(self):
        assert invoke("gradcheck", "--configurations", 2).exit_code == 0

    def test_corrupted_gradient_fails(self):
        assert invoke("gradcheck", "--configurations", 1, "--corrupt-gradient").exit_code == 1


class TestSweeps:
    def test_compare(self, smoke_config, tmp_path):
        result = invoke(
            "compare", "--config", smoke_config, "--out", tmp_path, "--seeds", "0",
            "--set", "train.epochs=1",
        )
        assert result.exit_code == 0, result.output
        rows = csv_rows(tmp_path / config.COMPARE_FILE)
        assert len(rows) == 6
        assert [row["sampling_mode"] for row in rows if row["seed"] == "median"] == ["ovt", "ros", "raos"]

    def test_bad_seeds(self, smoke_config, tmp_path):
        result = invoke("compare", "--config", smoke_config, "--out", tmp_path, "--seeds", "a,b")
        assert result.exit_code == 1

    def test_ablate(self, smoke_config, tmp_path):
        result = invoke(
            "ablate", "--config", smoke_config, "--out", tmp_path,
            "--param", "lam", "--values", "0,1", "--set", "train.epochs=1",
        )
        assert result.exit_code == 0, result.output
        rows = csv_rows(tmp_path / config.ABLATION_FILE)
        assert [row["value"] for row in rows] == ["0", "1"]

    def test_ablate_unknown_param(self, smoke_config, tmp_path):
        result = invoke(
            "ablate", "--config", smoke_config, "--out", tmp_path, "--param", "bogus", "--values", "1",
        )
        assert result.exit_code == 1
        assert "train.bogus" in result.output
