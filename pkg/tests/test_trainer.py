import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from omniview_tuning import config
from omniview_tuning.services.exceptions import (
    ConfigError,
    DatasetError,
    DimensionError,
    NonFiniteError,
)
from omniview_tuning.services.experiment import compare_sampling_modes, experiment_from_dict
from omniview_tuning.services.linalg import cosine_distances_to
from omniview_tuning.services.model import frozen_checksum, image_forward
from omniview_tuning.services.synthdata import MultiViewDataset, generate_splits
from omniview_tuning.services.trainer import (
    EpochRecord,
    Momentum,
    TrainConfig,
    TrainLog,
    batch_objective,
    build_model,
    final_summary,
    fit,
    iterate_batches,
    plan_epoch,
    prepare_training_data,
    pretrain,
    run_epoch,
    sgd_step,
    train_from_scratch,
)


@pytest.fixture
def model(tiny_train, tiny_splits):
    return build_model(tiny_train, tiny_splits.multiview.input_dim)


@pytest.fixture
def data(model, tiny_splits):
    return prepare_training_data(model, tiny_splits.multiview, tiny_splits.clean, tiny_splits.holdout)


def first_batch(data, model, cfg, seed=0):
    rng = np.random.default_rng(seed)
    plan = plan_epoch(model, data, cfg, rng, threads=1)
    return next(iterate_batches(data, plan, cfg, rng))


class TestSgdStep:
    def test_hand_case(self):
        updated = sgd_step({"p": np.array(1.0)}, {"p": np.array(2.0)}, 0.1)
        assert float(updated["p"]) == pytest.approx(0.8)

    def test_zero_gradient_keeps_value(self):
        params = {"p": np.array([1.5, -2.0])}
        assert_array_equal(sgd_step(params, {"p": np.zeros(2)}, 0.1)["p"], params["p"])

    def test_zero_rate_is_bitwise_identity(self, rng):
        params = {"p": rng.normal(size=(3, 4))}
        updated = sgd_step(params, {"p": rng.normal(size=(3, 4))}, 0.0)
        assert updated["p"].tobytes() == params["p"].tobytes()

    def test_missing_gradient_counts_as_zero(self):
        params = {"p": np.ones(2), "q": np.ones(2)}
        assert_array_equal(sgd_step(params, {"p": np.ones(2)}, 1.0)["q"], np.ones(2))

    def test_non_finite_gradient(self):
        with pytest.raises(NonFiniteError, match="p"):
            sgd_step({"p": np.ones(2)}, {"p": np.array([1.0, np.nan])}, 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_step({"p": np.ones(2)}, {"p": np.ones(3)}, 0.1)

    def test_negative_rate(self):
        with pytest.raises(ConfigError):
            sgd_step({"p": np.ones(2)}, {"p": np.ones(2)}, -0.1)


class TestMomentum:
    def test_accumulates_velocity(self):
        momentum = Momentum(0.5)
        momentum({"p": np.array(2.0)})
        assert float(momentum({"p": np.array(1.0)})["p"]) == pytest.approx(2.0)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"lam": -1.0},
            {"alpha": 1.5},
            {"k": 0},
            {"lora_rank": 0},
            {"batch_size": 0},
            {"learning_rate": -0.1},
            {"momentum": 1.0},
            {"clean_mix_ratio": 2.0},
            {"temperature": 0.0},
            {"margin_mode": "square"},
            {"sampling_mode": "greedy"},
            {"architecture": "conv"},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)

    def test_token_count_must_divide_input(self):
        with pytest.raises(ConfigError):
            TrainConfig(architecture="attention", token_count=5).encoder_config(24)

    def test_attention_encoder(self):
        visual = TrainConfig(architecture="attention", token_count=4).encoder_config(24)
        assert visual.token_dim == 6


class TestTrainLog:
    def record(self, epoch):
        return EpochRecord(epoch, 1.0, 0.5, 1.5, 0.2, 0.3, 0.9, 0.01)

    def test_epochs_must_increase(self):
        with pytest.raises(ConfigError):
            TrainLog((self.record(1), self.record(0)))

    def test_seconds_blank_unless_recorded(self):
        log = TrainLog((self.record(0), self.record(1)))
        assert [row["seconds"] for row in log.rows()] == [None, None]
        assert log.rows(record_wall_time=True)[0]["seconds"] == 0.01

    def test_summary_columns(self):
        summary = final_summary(TrainLog((self.record(0), self.record(1))))
        assert list(summary) == list(config.SUMMARY_COLUMNS)


class TestTrainingData:
    def test_empty_multiview(self, model, tiny_splits):
        with pytest.raises(DatasetError):
            prepare_training_data(model, MultiViewDataset(records=()), tiny_splits.clean)

    def test_dimension_mismatch(self, tiny_train, tiny_splits):
        other = build_model(tiny_train, tiny_splits.multiview.input_dim + 1)
        with pytest.raises(DatasetError, match="dim"):
            prepare_training_data(other, tiny_splits.multiview, tiny_splits.clean)

    def test_zero_shot_scored_on_clean_holdout_views(self, data, tiny_splits):
        clean_views = [r for r in tiny_splits.holdout.records if not r.is_hard_view]
        assert data.holdout_inputs.shape[0] == len(clean_views)


class TestBatches:
    def test_mixed_batch_sizes(self, data, model, tiny_train):
        batch = first_batch(data, model, tiny_train)
        assert batch.inputs.shape[0] == tiny_train.batch_size
        assert len(batch.outlier_rows) == batch.anchors.shape[0]
        assert all(row < tiny_train.batch_size // 2 for row in batch.outlier_rows)

    def test_multiview_only(self, data, model, tiny_train):
        cfg = replace(tiny_train, clean_mix_ratio=0.0)
        rng = np.random.default_rng(0)
        plan = plan_epoch(model, data, cfg, rng, threads=1)
        batches = list(iterate_batches(data, plan, cfg, rng))
        assert sum(b.inputs.shape[0] for b in batches) == data.multiview_inputs.shape[0]
        outliers = sum(len(s.indices) for s in plan.outliers.values())
        assert sum(len(b.outlier_rows) for b in batches) == outliers

    def test_clean_only(self, data, model, tiny_train):
        cfg = replace(tiny_train, clean_mix_ratio=1.0)
        rng = np.random.default_rng(0)
        plan = plan_epoch(model, data, cfg, rng, threads=1)
        batches = list(iterate_batches(data, plan, cfg, rng))
        assert sum(b.inputs.shape[0] for b in batches) == data.clean_inputs.shape[0]
        assert all(not b.outlier_rows for b in batches)

    def test_ovt_plan_picks_farthest_views(self, data, model, tiny_train):
        plan = plan_epoch(model, data, tiny_train, np.random.default_rng(0), threads=1)
        embeddings = image_forward(model, data.multiview_inputs).fused
        for object_id, rows in data.object_rows.items():
            distances = cosine_distances_to(embeddings[rows], plan.anchors[object_id])
            chosen = plan.outliers[object_id].indices
            rest = [d for i, d in enumerate(distances) if i not in chosen]
            assert min(distances[list(chosen)]) >= max(rest)


    def test_epoch_plan_comes_from_the_pre_update_state(self, data, model, tiny_train):
        expected = plan_epoch(model, data, tiny_train, np.random.default_rng(3))
        outcome = run_epoch(model, data, tiny_train, epoch=1, rng=np.random.default_rng(3))
        assert outcome.plan.digest() == expected.digest()
        assert frozen_checksum(outcome.state) == frozen_checksum(model)


class TestObjective:
    def test_descent_direction(self, data, model, tiny_train):
        batch = first_batch(data, model, tiny_train)
        start = batch_objective(model, batch, tiny_train)
        params = model.trainable_parameters()
        for rate in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
            moved = model.with_trainable(sgd_step(params, start.grads, rate))
            if batch_objective(moved, batch, tiny_train).loss < start.loss:
                break
        else:
            pytest.fail("no step size decreased the loss")

    def test_lam_zero_drops_view_consistency(self, data, model, tiny_train):
        batch = first_batch(data, model, tiny_train)
        result = batch_objective(model, batch, replace(tiny_train, lam=0.0))
        assert result.loss == pytest.approx(result.itc)


class TestFit:
    def test_needs_an_epoch(self, model, tiny_splits, tiny_train):
        with pytest.raises(ConfigError):
            fit(model, tiny_splits.multiview, tiny_splits.clean, replace(tiny_train, epochs=0))

    def test_log_shape(self, model, tiny_splits, tiny_train):
        log = fit(model, tiny_splits.multiview, tiny_splits.clean, tiny_train).log
        assert [r.epoch for r in log.records] == [0, 1, 2]

    def test_zero_rate_keeps_parameters(self, model, tiny_splits, tiny_train):
        cfg = replace(tiny_train, lam=0.0, learning_rate=0.0)
        state = fit(model, tiny_splits.multiview, tiny_splits.clean, cfg).state
        for name, value in model.trainable_parameters().items():
            assert_array_equal(state.trainable_parameters()[name], value)

    def test_frozen_weights_untouched(self, model, tiny_splits, tiny_train):
        state = fit(model, tiny_splits.multiview, tiny_splits.clean, tiny_train).state
        assert frozen_checksum(state) == frozen_checksum(model)

    def test_deterministic(self, model, tiny_splits, tiny_train):
        first = fit(model, tiny_splits.multiview, tiny_splits.clean, tiny_train)
        second = fit(model, tiny_splits.multiview, tiny_splits.clean, tiny_train)
        assert first.log.rows() == second.log.rows()

    def test_momentum_run(self, model, tiny_splits, tiny_train):
        cfg = replace(tiny_train, momentum=0.9)
        log = fit(model, tiny_splits.multiview, tiny_splits.clean, cfg).log
        assert np.isfinite(log.last.total_loss)

    def test_writes_checkpoint(self, model, tiny_splits, tiny_train, tmp_path):
        path = tmp_path / config.CHECKPOINT_FILE
        fit(model, tiny_splits.multiview, tiny_splits.clean, tiny_train, checkpoint_path=path)
        assert path.is_file()

    @pytest.mark.parametrize("mode", ["ros", "raos"])
    def test_baseline_sampling_modes(self, model, tiny_splits, tiny_train, mode):
        cfg = replace(tiny_train, sampling_mode=mode, epochs=1)
        assert fit(model, tiny_splits.multiview, tiny_splits.clean, cfg).log.last.epoch == 1

    def test_trainable_temperature(self, tiny_splits, tiny_train):
        cfg = replace(tiny_train, train_temperature=True, epochs=1)
        model = build_model(cfg, tiny_splits.multiview.input_dim)
        state = fit(model, tiny_splits.multiview, tiny_splits.clean, cfg).state
        assert state.log_temperature != model.log_temperature


class TestPretrain:
    def test_changes_base_weights(self, model, tiny_splits, tiny_train):
        assert frozen_checksum(pretrain(model, tiny_splits.clean, tiny_train)) != frozen_checksum(model)

    def test_skipped_without_epochs(self, model, tiny_splits, tiny_train):
        cfg = replace(tiny_train, pretrain_epochs=0)
        assert pretrain(model, tiny_splits.clean, cfg) is model


@pytest.mark.slow
def test_default_run_improves_invariance():
    raw = json.loads((Path(__file__).resolve().parents[1] / "configs" / "default.json").read_text())
    experiment = experiment_from_dict(raw)
    log = train_from_scratch(experiment.train, generate_splits(experiment.gen)).log
    assert log.last.mean_intra_object_distance <= 0.6 * log.first.mean_intra_object_distance
    assert abs(log.last.zero_shot_top1 - log.first.zero_shot_top1) <= 0.05


@pytest.mark.slow
def test_farthest_views_beat_random_sampling():
    raw = json.loads((Path(__file__).resolve().parents[1] / "configs" / "default.json").read_text())
    rows = compare_sampling_modes(experiment_from_dict(raw), seeds=range(5))
    median = {
        row["sampling_mode"]: row["mean_intra_object_distance"] for row in rows if row["seed"] == "median"
    }
    assert median["ovt"] <= median["ros"] <= median["raos"]
