import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from omniview_tuning import config
from omniview_tuning.services.evaluation import (
    ClassBank,
    ModelTextEmbedder,
    accuracy_at_beta,
    adaptive_threshold,
    build_class_bank,
    build_report,
    description_accuracy,
    invariance_report,
    zero_shot_classify,
)
from omniview_tuning.services.exceptions import ConfigError, DatasetError, DimensionError
from omniview_tuning.services.trainer import build_model


def bank_of(rows, labels=None):
    rows = np.asarray(rows, dtype=np.float64)
    return ClassBank(labels=tuple(labels or [f"c{i}" for i in range(len(rows))]), embeddings=rows)


class TestZeroShot:
    def test_exact_class_embedding_wins(self, rng):
        bank = bank_of(rng.normal(size=(4, 5)))
        result = zero_shot_classify(bank.embeddings[2:3], bank, ["c2"])
        assert result.predictions == ("c2",)
        assert result.top1 == 1.0
        assert np.argmax(result.confidences[0]) == 2

    def test_single_class(self, rng):
        bank = bank_of(rng.normal(size=(1, 3)))
        assert zero_shot_classify(rng.normal(size=(5, 3)), bank, ["c0"] * 5).top1 == 1.0

    def test_matches_argmax(self, rng):
        bank = bank_of(rng.normal(size=(6, 4)))
        images = rng.normal(size=(50, 4))
        result = zero_shot_classify(images, bank, ["c0"] * 50)
        for image, prediction in zip(images, result.predictions):
            cosines = [
                image @ row / (np.linalg.norm(image) * np.linalg.norm(row)) for row in bank.embeddings
            ]
            assert prediction == f"c{int(np.argmax(cosines))}"

    def test_top_k_is_monotone(self, rng):
        bank = bank_of(rng.normal(size=(6, 4)))
        truths = [f"c{i}" for i in rng.integers(0, 6, size=40)]
        accuracy = zero_shot_classify(rng.normal(size=(40, 4)), bank, truths, k=[1, 3, 6]).accuracy
        assert accuracy[1] <= accuracy[3] <= accuracy[6] == 1.0

    def test_confidences_are_distributions(self, rng):
        bank = bank_of(rng.normal(size=(3, 4)))
        result = zero_shot_classify(rng.normal(size=(7, 4)), bank, ["c1"] * 7)
        assert_allclose(result.confidences.sum(axis=1), np.ones(7))

    def test_empty_bank(self):
        with pytest.raises(ConfigError):
            zero_shot_classify(np.ones((1, 2)), bank_of(np.empty((0, 2)), []), ["c0"])

    def test_k_beyond_bank(self, rng):
        with pytest.raises(ConfigError):
            zero_shot_classify(rng.normal(size=(2, 3)), bank_of(rng.normal(size=(2, 3))), ["c0"] * 2, k=3)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            zero_shot_classify(rng.normal(size=(2, 4)), bank_of(rng.normal(size=(2, 3))), ["c0"] * 2)

    def test_duplicate_labels(self):
        with pytest.raises(ConfigError):
            bank_of(np.eye(2), ["a", "a"])

    def test_bank_from_embedder(self):
        vectors = {"a photo of mug": np.array([1.0, 0.0]), "a photo of cup": np.array([0.0, 1.0])}
        bank = build_class_bank(["mug", "cup"], vectors.__getitem__)
        assert bank.labels == ("mug", "cup") and bank.embeddings.shape == (2, 2)


class TestInvariance:
    def test_identical_views(self):
        report = invariance_report([np.tile([1.0, 2.0, 3.0], (4, 1))], epsilon=0.0)
        assert report.max_distances[0] == pytest.approx(0.0, abs=1e-12)
        assert report.mean_max_distance == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pair(self):
        report = invariance_report([np.eye(2)], epsilon=0.5)
        assert report.max_distances == (pytest.approx(1.0),)
        assert report.fraction_within == 0.0

    def test_single_view_object(self):
        report = invariance_report([np.ones((1, 3)), np.eye(2)], epsilon=0.5)
        assert report.max_distances[0] == 0.0
        assert report.fraction_within == 0.5

    def test_no_objects(self):
        assert invariance_report([], epsilon=0.1).fraction_within == 1.0

    def test_matches_brute_force(self, rng):
        groups = [rng.normal(size=(int(rng.integers(2, 7)), 4)) for _ in range(20)]
        report = invariance_report(groups, epsilon=0.3)
        expected = []
        for group in groups:
            unit = group / np.linalg.norm(group, axis=1, keepdims=True)
            expected.append(
                max(1.0 - unit[i] @ unit[j] for i in range(len(unit)) for j in range(i + 1, len(unit)))
            )
        assert_allclose(report.max_distances, expected, atol=1e-12)
        assert report.fraction_within == pytest.approx(np.mean([d <= 0.3 for d in expected]))

    def test_negative_epsilon(self):
        with pytest.raises(ConfigError):
            invariance_report([np.eye(2)], epsilon=-0.1)


class TestDescriptionAccuracy:
    vectors = {
        "truth": np.array([1.0, 0.0]),
        "same": np.array([2.0, 0.0]),
        "close": np.array([0.6, 0.8]),
        "far": np.array([0.4, math.sqrt(0.84)]),
    }

    def test_threshold_counts(self):
        assert accuracy_at_beta(np.array([1.0, 0.6, 0.4]), 0.5) == pytest.approx(2 / 3)

    def test_with_embedder(self):
        accuracy = description_accuracy(
            ["same", "close", "far"], ["truth"] * 3, self.vectors.__getitem__, beta=0.5
        )
        assert accuracy == pytest.approx(2 / 3)

    def test_lowest_threshold_accepts_all(self):
        assert accuracy_at_beta(np.array([-1.0, 0.0, 1.0]), -1.0) == 1.0

    def test_identical_texts_at_one(self):
        accuracy = description_accuracy(
            ["same"], ["truth"], self.vectors.__getitem__, beta=config.ONE_EQUIVALENT_BETA
        )
        assert accuracy == 1.0

    def test_monotone_in_beta(self, rng):
        similarities = rng.uniform(-1.0, 1.0, size=100)
        values = [accuracy_at_beta(similarities, beta) for beta in np.linspace(-1.0, 1.0, 21)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("beta", [-1.5, 1.5])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(ConfigError):
            accuracy_at_beta(np.array([0.5]), beta)

    def test_empty_input(self):
        with pytest.raises(ConfigError):
            accuracy_at_beta(np.array([]), 0.5)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            description_accuracy(["same"], ["truth", "truth"], self.vectors.__getitem__, 0.5)


class TestAdaptiveThreshold:
    def test_mean(self):
        assert adaptive_threshold([0.4, 0.6]) == pytest.approx(0.5)

    def test_matches_exact_sum(self, rng):
        values = rng.uniform(-1.0, 1.0, size=1000).tolist()
        assert adaptive_threshold(values) == pytest.approx(math.fsum(values) / 1000, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ConfigError):
            adaptive_threshold([])


class TestReport:
    @pytest.fixture
    def model(self, tiny_train, tiny_splits):
        return build_model(tiny_train, tiny_splits.holdout.input_dim)

    def report(self, model, dataset, top_k=(1, 2)):
        return build_report(
            model, dataset, epsilon=0.1, betas=(1.0, 0.5), adaptive_beta=True, top_k=top_k
        )

    def test_sections(self, model, tiny_splits):
        report = self.report(model, tiny_splits.holdout)
        assert report["records"] == len(tiny_splits.holdout)
        assert report["objects"] == 3
        assert set(report["zero_shot"]) == {"all", "clean", "hard"}
        assert set(report["zero_shot"]["all"]) == {"top1", "top2"}
        assert set(report["description_accuracy"]["all"]) == {"beta_1.0", "beta_0.5", "beta_adaptive"}
        assert report["parameters"]["trainable"] < report["parameters"]["total"]

    def test_deterministic(self, model, tiny_splits):
        assert self.report(model, tiny_splits.holdout) == self.report(model, tiny_splits.holdout)

    def test_top_k_above_bank_is_skipped(self, model, tiny_splits):
        report = self.report(model, tiny_splits.holdout, top_k=(1, 10))
        assert set(report["zero_shot"]["all"]) == {"top1"}

    def test_clean_set_has_no_hard_split(self, model, tiny_splits):
        report = self.report(model, tiny_splits.clean)
        assert report["zero_shot"]["hard"] is None

    def test_text_embedder_uses_model(self, model):
        embedder = ModelTextEmbedder(model)
        assert embedder("a photo of mug").shape == (model.text.embed_dim,)

    def test_dimension_mismatch(self, tiny_train, tiny_splits):
        other = build_model(tiny_train, tiny_splits.holdout.input_dim + 2)
        with pytest.raises(DatasetError):
            self.report(other, tiny_splits.holdout)
