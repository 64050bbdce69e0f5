import json
from pathlib import Path

import pytest

from omniview_tuning.services.exceptions import ConfigError
from omniview_tuning.services.experiment import (
    EvalSettings,
    experiment_from_dict,
    load_experiment,
    parse_value,
)


class TestLoadExperiment:
    def test_defaults(self):
        experiment = load_experiment()
        assert experiment.train.lam == 1.0 and experiment.gen.views_per_object == 20
        assert experiment.output_dir == Path("runs/default")

    def test_manifest_and_overrides(self, smoke_config):
        experiment = load_experiment(
            smoke_config, ["train.lam=0.5", "train.sampling_mode=raos", "eval.top_k=[1]"]
        )
        assert experiment.gen.input_dim == 48
        assert experiment.train.lam == 0.5
        assert experiment.train.sampling_mode == "raos"
        assert experiment.eval.top_k == (1,)

    def test_seed_and_output_win(self, smoke_config, tmp_path):
        experiment = load_experiment(smoke_config, seed=9, output_dir=tmp_path)
        assert experiment.gen.seed == experiment.train.seed == 9
        assert experiment.output_dir == tmp_path

    @pytest.mark.parametrize("override", ["gen.bogus=1", "model.lam=1", "lam=1", "train.lam"])
    def test_bad_override(self, override):
        with pytest.raises(ConfigError):
            load_experiment(overrides=[override])

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            load_experiment(overrides=["train.k=0"])

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="extra"):
            experiment_from_dict({"extra": 1})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_experiment(path)

    def test_to_json_round_trip(self, smoke_config):
        experiment = load_experiment(smoke_config)
        assert experiment_from_dict(json.loads(json.dumps(experiment.to_json()))) == experiment


def test_parse_value():
    assert parse_value("0.5") == 0.5
    assert parse_value("true") is True
    assert parse_value("ovt") == "ovt"


@pytest.mark.parametrize("overrides", [{"epsilon": -1.0}, {"betas": (1.5,)}, {"top_k": (0,)}])
def test_eval_settings_validation(overrides):
    with pytest.raises(ConfigError):
        EvalSettings(**overrides)
