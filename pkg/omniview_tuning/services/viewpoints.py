"""Inner maximization step: anchor embeddings and outlier viewpoints per object."""
import hashlib
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np

from omniview_tuning import config
from omniview_tuning.services.exceptions import ConfigError, DimensionError
from omniview_tuning.services.linalg import (
    Matrix,
    Vector,
    cosine_distance_matrix,
    cosine_distances_to,
)


logger = logging.getLogger(__name__)

SamplingMode = Literal["ovt", "ros", "raos"]


@dataclass(frozen=True)
class ObjectEmbeddings:
    object_id: int
    embeddings: Matrix
    view_ids: tuple[int, ...]

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError(
                f"object {self.object_id} needs at least one view, got {self.embeddings.shape}"
            )
        if len(self.view_ids) != self.embeddings.shape[0]:
            raise DimensionError(f"object {self.object_id}: view ids do not match rows")

    @property
    def view_count(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class AnchorResult:
    anchor: Vector
    weights: Vector
    raw_weights: Vector


@dataclass(frozen=True)
class OutlierSelection:
    indices: tuple[int, ...]
    distances: tuple[float, ...]


OutlierSet = dict[int, OutlierSelection]


@dataclass(frozen=True)
class EpochPlan:
    anchors: dict[int, Vector]
    outliers: OutlierSet
    sampling_mode: SamplingMode = "ovt"

    def to_json(self) -> dict:
        return {
            "sampling_mode": self.sampling_mode,
            "objects": {
                str(object_id): {
                    "anchor": self.anchors[object_id].tolist(),
                    "outliers": list(selection.indices),
                    "distances": list(selection.distances),
                }
                for object_id, selection in self.outliers.items()
            },
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def mean_outlier_distance(self) -> float:
        distances = [d for s in self.outliers.values() for d in s.distances]
        return float(np.mean(distances)) if distances else 0.0


def nearest_neighbors(obj: ObjectEmbeddings, j: int, k: int = config.NEAREST_NEIGHBORS) -> tuple[int, ...]:
    if k < 1:
        raise ConfigError(f"neighbor count must be >= 1, got {k}")
    return _neighbors_from_distances(cosine_distance_matrix(obj.embeddings), j, k)


def anchor_embedding(
    obj: ObjectEmbeddings, neighbors: int = config.NEAREST_NEIGHBORS
) -> AnchorResult:
    """Nearest-neighbor weighted centroid: views in dense regions weigh more."""
    if obj.view_count == 1:
        one = np.ones(1)
        return AnchorResult(anchor=obj.embeddings[0].copy(), weights=one, raw_weights=one)
    distances = cosine_distance_matrix(obj.embeddings)
    raw = np.empty(obj.view_count)
    for j in range(obj.view_count):
        spread = sum(distances[j, h] for h in _neighbors_from_distances(distances, j, neighbors))
        raw[j] = 1.0 / max(spread, config.ANCHOR_WEIGHT_FLOOR)
    weights = raw / np.sum(raw)
    return AnchorResult(anchor=weights @ obj.embeddings, weights=weights, raw_weights=raw)


def select_outliers(obj: ObjectEmbeddings, anchor: Vector, k: int) -> OutlierSelection:
    """Top-k views farthest from the anchor, ties broken by lower index."""
    if k < 1:
        raise ConfigError(f"outlier count K must be >= 1, got {k}")
    distances = cosine_distances_to(obj.embeddings, anchor)
    order = np.argsort(-distances, kind="stable")[: min(k, obj.view_count)]
    return OutlierSelection(
        indices=tuple(int(i) for i in order),
        distances=tuple(float(distances[i]) for i in order),
    )


def build_epoch_plan(
    objects: Sequence[ObjectEmbeddings],
    k: int,
    *,
    neighbors: int = config.NEAREST_NEIGHBORS,
    threads: int = 1,
) -> EpochPlan:
    def plan_object(obj: ObjectEmbeddings) -> tuple[Vector, OutlierSelection]:
        anchor = anchor_embedding(obj, neighbors).anchor
        return anchor, select_outliers(obj, anchor, k)

    results = _map_objects(plan_object, objects, threads)
    plan = EpochPlan(
        anchors={obj.object_id: anchor for obj, (anchor, _) in zip(objects, results)},
        outliers={obj.object_id: selection for obj, (_, selection) in zip(objects, results)},
    )
    logger.debug("maximization step planned %d objects", len(objects))
    return plan


def random_outliers(
    objects: Sequence[ObjectEmbeddings],
    k: int,
    rng: np.random.Generator,
    *,
    neighbors: int = config.NEAREST_NEIGHBORS,
) -> EpochPlan:
    """OVT-ROS: weighted-centroid anchors, uniformly sampled outliers."""
    anchors = {obj.object_id: anchor_embedding(obj, neighbors).anchor for obj in objects}
    return EpochPlan(
        anchors=anchors,
        outliers={
            obj.object_id: _random_selection(obj, anchors[obj.object_id], k, rng)
            for obj in objects
        },
        sampling_mode="ros",
    )


def random_anchors(
    objects: Sequence[ObjectEmbeddings], k: int, rng: np.random.Generator
) -> EpochPlan:
    """OVT-RAOS: a uniformly random view is the anchor, outliers sampled uniformly."""
    anchors, outliers = {}, {}
    for obj in objects:
        anchor = obj.embeddings[int(rng.integers(obj.view_count))].copy()
        anchors[obj.object_id] = anchor
        outliers[obj.object_id] = _random_selection(obj, anchor, k, rng)
    return EpochPlan(anchors=anchors, outliers=outliers, sampling_mode="raos")


def plan_for_mode(
    objects: Sequence[ObjectEmbeddings],
    k: int,
    sampling_mode: SamplingMode,
    rng: np.random.Generator,
    *,
    neighbors: int = config.NEAREST_NEIGHBORS,
    threads: int = 1,
) -> EpochPlan:
    if sampling_mode == "ovt":
        return build_epoch_plan(objects, k, neighbors=neighbors, threads=threads)
    if sampling_mode == "ros":
        return random_outliers(objects, k, rng, neighbors=neighbors)
    if sampling_mode == "raos":
        return random_anchors(objects, k, rng)
    raise ConfigError(f"unknown sampling_mode {sampling_mode!r}")


def _random_selection(
    obj: ObjectEmbeddings, anchor: Vector, k: int, rng: np.random.Generator
) -> OutlierSelection:
    if k < 1:
        raise ConfigError(f"outlier count K must be >= 1, got {k}")
    count = min(k, obj.view_count)
    if count == obj.view_count:
        picked = np.arange(count)
    else:
        picked = rng.choice(obj.view_count, size=count, replace=False)
    distances = cosine_distances_to(obj.embeddings, anchor)
    return OutlierSelection(
        indices=tuple(int(i) for i in picked),
        distances=tuple(float(distances[i]) for i in picked),
    )


def _neighbors_from_distances(distances: Matrix, j: int, k: int) -> tuple[int, ...]:
    candidates = np.delete(np.arange(distances.shape[0]), j)
    order = np.argsort(distances[j, candidates], kind="stable")
    return tuple(int(candidates[i]) for i in order[:k])


def _map_objects(function, objects: Sequence[ObjectEmbeddings], threads: int) -> list:
    if threads <= 1 or len(objects) < 2:
        return [function(obj) for obj in objects]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, objects))
