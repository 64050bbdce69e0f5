"""Training objectives: image-text contrastive loss, viewpoint consistency
loss and their weighted sum. Each loss returns its gradients alongside the value."""
from dataclasses import dataclass
from typing import Literal

import numpy as np

from omniview_tuning.services.exceptions import ConfigError, DimensionError
from omniview_tuning.services.linalg import (
    Matrix,
    Vector,
    cosine_distance,
    cosine_distance_vjp,
    log_softmax_rows,
    normalize_rows,
    normalize_rows_vjp,
    softmax_rows,
)


MarginMode = Literal["additive", "hinge"]


@dataclass(frozen=True)
class ItcBatch:
    image_embeddings: Matrix
    text_embeddings: Matrix
    temperature: float


@dataclass(frozen=True)
class ItcResult:
    loss: float
    grad_image: Matrix
    grad_text: Matrix
    grad_temperature: float


@dataclass(frozen=True)
class VcBatch:
    outliers: Matrix
    anchors: Matrix
    margin: float = 0.0
    margin_mode: MarginMode = "additive"


@dataclass(frozen=True)
class VcResult:
    loss: float
    grad_outliers: Matrix


def itc_loss(batch: ItcBatch) -> ItcResult:
    images, texts, tau = batch.image_embeddings, batch.text_embeddings, batch.temperature
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if images.ndim != 2 or images.shape != texts.shape or images.shape[0] < 1:
        raise DimensionError(
            f"ITC needs two equal N x d batches with N >= 1, got {images.shape} and {texts.shape}"
        )
    n = images.shape[0]
    image_unit, image_norms = normalize_rows(images)
    text_unit, text_norms = normalize_rows(texts)
    similarity = image_unit @ text_unit.T
    logits = similarity / tau

    image_to_text = -np.mean(np.diagonal(log_softmax_rows(logits)))
    text_to_image = -np.mean(np.diagonal(log_softmax_rows(logits.T)))
    loss = 0.5 * (image_to_text + text_to_image)

    identity = np.eye(n)
    grad_logits = (
        (softmax_rows(logits) - identity) + (softmax_rows(logits.T) - identity).T
    ) / (2 * n)
    grad_similarity = grad_logits / tau
    grad_temperature = -float(np.sum(grad_logits * similarity)) / tau**2
    grad_image = normalize_rows_vjp(image_unit, image_norms, grad_similarity @ text_unit)
    grad_text = normalize_rows_vjp(text_unit, text_norms, grad_similarity.T @ image_unit)
    return ItcResult(
        loss=max(0.0, float(loss)),
        grad_image=grad_image,
        grad_text=grad_text,
        grad_temperature=grad_temperature,
    )


def vc_pair_loss(
    z: Vector, anchor: Vector, margin: float = 0.0, margin_mode: MarginMode = "additive"
) -> float:
    return max(_margined(cosine_distance(z, anchor), margin, margin_mode), 0.0)


def vc_loss(batch: VcBatch) -> VcResult:
    """Sum of pair losses; anchors are constants, so only outliers get gradients."""
    outliers, anchors = batch.outliers, batch.anchors
    if outliers.size == 0:
        return VcResult(loss=0.0, grad_outliers=np.zeros_like(outliers))
    if outliers.shape != anchors.shape:
        raise DimensionError(
            f"outliers {outliers.shape} and anchors {anchors.shape} must pair up"
        )
    total = 0.0
    grad = np.zeros_like(outliers)
    for row, (z, anchor) in enumerate(zip(outliers, anchors)):
        value = _margined(cosine_distance(z, anchor), batch.margin, batch.margin_mode)
        if value > 0.0:
            total += value
            grad[row] = cosine_distance_vjp(z, anchor)
    return VcResult(loss=total, grad_outliers=grad)


def total_loss(itc: float, vc: float, lam: float) -> float:
    if lam < 0:
        raise ConfigError(f"loss balance lambda must be >= 0, got {lam}")
    return itc + lam * vc


def _margined(distance: float, margin: float, margin_mode: MarginMode) -> float:
    if margin_mode == "additive":
        return distance + margin
    if margin_mode == "hinge":
        return distance - margin
    raise ConfigError(f"unknown margin_mode {margin_mode!r}")
