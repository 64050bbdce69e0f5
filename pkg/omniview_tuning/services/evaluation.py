"""Zero-shot classification, viewpoint-invariance diagnostics and description accuracy."""
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from omniview_tuning import config
from omniview_tuning.services.exceptions import ConfigError, DatasetError, DimensionError
from omniview_tuning.services.linalg import (
    Matrix,
    Vector,
    cosine_distance_matrix,
    cosine_similarity,
    normalize_rows,
    softmax_rows,
)
from omniview_tuning.services.model import ModelState, encode_text, image_forward, parameter_counts
from omniview_tuning.services.synthdata import MultiViewDataset, zero_shot_prompt


logger = logging.getLogger(__name__)


class TextEmbedder(Protocol):
    def __call__(self, text: str) -> Vector:
        ...


class ModelTextEmbedder:
    """The frozen text tower of a model state, used as the metric embedder."""

    def __init__(self, state: ModelState):
        self.state = state

    def __call__(self, text: str) -> Vector:
        return encode_text(text, self.state)


@dataclass(frozen=True)
class ClassBank:
    labels: tuple[str, ...]
    embeddings: Matrix

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("class bank labels must be unique")
        if self.embeddings.shape[0] != len(self.labels):
            raise DimensionError(
                f"{len(self.labels)} labels but {self.embeddings.shape[0]} embeddings"
            )

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ZeroShotResult:
    predictions: tuple[str, ...]
    rankings: np.ndarray
    confidences: Matrix
    accuracy: dict[int, float]

    @property
    def top1(self) -> float:
        return self.accuracy[1]


@dataclass(frozen=True)
class InvarianceReport:
    max_distances: tuple[float, ...]
    fraction_within: float
    mean_max_distance: float
    mean_pairwise_distance: float
    epsilon: float


def build_class_bank(labels: Sequence[str], embedder: TextEmbedder) -> ClassBank:
    if not labels:
        raise ConfigError("class bank needs at least one label")
    return ClassBank(
        labels=tuple(labels),
        embeddings=np.stack([embedder(zero_shot_prompt(label)) for label in labels]),
    )


def zero_shot_classify(
    image_embeddings: Matrix,
    bank: ClassBank,
    truths: Sequence[str],
    k: int | Sequence[int] = 1,
    temperature: float = 0.07,
) -> ZeroShotResult:
    if len(bank) == 0:
        raise ConfigError("class bank is empty")
    ks = sorted({1, *([k] if isinstance(k, int) else k)})
    if ks[0] < 1 or ks[-1] > len(bank):
        raise ConfigError(f"top-k values {ks} must lie in [1, {len(bank)}]")
    if image_embeddings.shape[0] != len(truths):
        raise DimensionError(f"{image_embeddings.shape[0]} embeddings but {len(truths)} labels")
    if image_embeddings.shape[1] != bank.embeddings.shape[1]:
        raise DimensionError(
            f"image dim {image_embeddings.shape[1]} != class dim {bank.embeddings.shape[1]}"
        )
    images, _ = normalize_rows(image_embeddings)
    classes, _ = normalize_rows(bank.embeddings)
    similarity = images @ classes.T
    rankings = np.argsort(-similarity, axis=1, kind="stable")
    truth_index = np.array([bank.labels.index(t) if t in bank.labels else -1 for t in truths])
    accuracy = {
        top: float(np.mean(np.any(rankings[:, :top] == truth_index[:, None], axis=1)))
        if len(truths)
        else 0.0
        for top in ks
    }
    return ZeroShotResult(
        predictions=tuple(bank.labels[i] for i in rankings[:, 0]),
        rankings=rankings,
        confidences=softmax_rows(similarity / temperature),
        accuracy=accuracy,
    )


def invariance_report(groups: Sequence[Matrix], epsilon: float) -> InvarianceReport:
    """Per-object worst-case cosine distance between two views."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    max_distances, pairwise = [], []
    for group in groups:
        if group.shape[0] < 2:
            max_distances.append(0.0)
            pairwise.append(0.0)
            continue
        distances = cosine_distance_matrix(group)
        upper = distances[np.triu_indices(group.shape[0], k=1)]
        max_distances.append(float(np.max(upper)))
        pairwise.append(float(np.mean(upper)))
    if not max_distances:
        return InvarianceReport((), 1.0, 0.0, 0.0, epsilon)
    return InvarianceReport(
        max_distances=tuple(max_distances),
        fraction_within=float(np.mean([d <= epsilon for d in max_distances])),
        mean_max_distance=float(np.mean(max_distances)),
        mean_pairwise_distance=float(np.mean(pairwise)),
        epsilon=epsilon,
    )


def description_similarities(
    generated: Sequence[str], truths: Sequence[str], embedder: TextEmbedder
) -> Vector:
    if len(generated) != len(truths):
        raise DimensionError(f"{len(generated)} descriptions but {len(truths)} ground truths")
    if not generated:
        raise ConfigError("description accuracy needs at least one sample")
    cache: dict[str, Vector] = {}

    def embed(text: str) -> Vector:
        if text not in cache:
            cache[text] = embedder(text)
        return cache[text]

    return np.array([cosine_similarity(embed(g), embed(t)) for g, t in zip(generated, truths)])


def description_accuracy(
    generated: Sequence[str],
    truths: Sequence[str],
    embedder: TextEmbedder,
    beta: float,
) -> float:
    return accuracy_at_beta(description_similarities(generated, truths, embedder), beta)


def accuracy_at_beta(similarities: Vector, beta: float) -> float:
    if not -1.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [-1, 1], got {beta}")
    if len(similarities) == 0:
        raise ConfigError("description accuracy needs at least one sample")
    return float(np.mean(np.asarray(similarities) >= beta))


def adaptive_threshold(clean_similarities: Sequence[float]) -> float:
    """Mean similarity on the clean distribution."""
    if len(clean_similarities) == 0:
        raise ConfigError("adaptive threshold needs at least one clean similarity")
    return float(np.mean(clean_similarities))


def build_report(
    state: ModelState,
    dataset: MultiViewDataset,
    *,
    epsilon: float,
    betas: Sequence[float],
    adaptive_beta: bool,
    top_k: Sequence[int],
) -> dict:
    """Zero-shot accuracy, invariance and Acc@beta, overall and split into
    clean and hard views. A beta of 1.0 is scored as 1 - 1e-9."""
    if len(dataset) == 0:
        raise DatasetError("evaluation set is empty")
    if dataset.input_dim != state.visual.input_dim:
        raise DatasetError(
            f"evaluation inputs have dim {dataset.input_dim}, model expects {state.visual.input_dim}"
        )
    embedder = ModelTextEmbedder(state)
    bank = build_class_bank(dataset.categories, embedder)
    ks = sorted({k for k in top_k if k <= len(bank)} | {1})
    if len(ks) < len(set(top_k) | {1}):
        logger.warning("top-k values above the %d known classes are skipped", len(bank))

    embeddings = image_forward(state, dataset.inputs()).fused
    labels = [r.category for r in dataset.records]
    result = zero_shot_classify(embeddings, bank, labels, k=ks, temperature=state.temperature)
    similarities = description_similarities(
        [zero_shot_prompt(p) for p in result.predictions],
        [zero_shot_prompt(t) for t in labels],
        embedder,
    )
    hard = np.array([r.is_hard_view for r in dataset.records])
    splits = {"all": np.ones(len(dataset), dtype=bool), "clean": ~hard, "hard": hard}

    thresholds = {f"beta_{beta}": config.ONE_EQUIVALENT_BETA if beta == 1.0 else beta for beta in betas}
    adaptive = None
    if adaptive_beta and splits["clean"].any():
        adaptive = adaptive_threshold(similarities[splits["clean"]].tolist())
        thresholds["beta_adaptive"] = adaptive

    rows = dataset.object_rows()
    invariance = invariance_report([embeddings[r] for r in rows.values()], epsilon)
    counts = parameter_counts(state)
    return {
        "records": len(dataset),
        "objects": len(rows),
        "categories": list(bank.labels),
        "parameters": {"total": counts.total, "trainable": counts.trainable},
        "zero_shot": {
            name: _split_accuracy(result.rankings[mask], bank, np.array(labels)[mask], ks)
            for name, mask in splits.items()
        },
        "invariance": {
            "epsilon": invariance.epsilon,
            "fraction_within": invariance.fraction_within,
            "mean_max_distance": invariance.mean_max_distance,
            "mean_pairwise_distance": invariance.mean_pairwise_distance,
        },
        "adaptive_beta": adaptive,
        "description_accuracy": {
            name: (
                {key: accuracy_at_beta(similarities[mask], beta) for key, beta in thresholds.items()}
                if mask.any()
                else None
            )
            for name, mask in splits.items()
        },
    }


def _split_accuracy(
    rankings: np.ndarray, bank: ClassBank, labels: np.ndarray, ks: Sequence[int]
) -> dict[str, float] | None:
    if len(labels) == 0:
        return None
    truth = np.array([bank.labels.index(label) for label in labels])
    return {
        f"top{k}": float(np.mean(np.any(rankings[:, :k] == truth[:, None], axis=1))) for k in ks
    }
