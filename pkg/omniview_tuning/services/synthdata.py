"""Synthetic multi-view image-caption data and category-guided prompts."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from omniview_tuning import config
from omniview_tuning.services.exceptions import (
    ConfigError,
    DatasetError,
    DatasetFormatError,
    SeparationError,
)
from omniview_tuning.services.linalg import Matrix, Vector
from omniview_tuning.storage import read_jsonl, write_jsonl


logger = logging.getLogger(__name__)

MAX_PROTOTYPE_RETRIES = 1000
_RECORD_KEYS = ("object_id", "view_id", "category", "caption", "hard", "x")


@dataclass(frozen=True)
class ViewRecord:
    object_id: int
    view_id: int
    category: str
    x: Vector = field(repr=False)
    caption: str
    is_hard_view: bool = False

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ViewRecord):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and self.view_id == other.view_id
            and self.category == other.category
            and self.caption == other.caption
            and self.is_hard_view == other.is_hard_view
            and np.array_equal(self.x, other.x)
        )


@dataclass(frozen=True)
class MultiViewDataset:
    records: tuple[ViewRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def input_dim(self) -> int:
        if not self.records:
            raise DatasetError("empty dataset has no input dimension")
        return self.records[0].x.shape[0]

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(sorted({r.category for r in self.records}))

    def inputs(self) -> Matrix:
        return np.stack([r.x for r in self.records])

    def captions(self) -> list[str]:
        return [r.caption for r in self.records]

    def object_rows(self) -> dict[int, list[int]]:
        rows: dict[int, list[int]] = {}
        for index, record in enumerate(self.records):
            rows.setdefault(record.object_id, []).append(index)
        return rows


@dataclass(frozen=True)
class GenSpec:
    num_categories: int = 10
    objects_per_category: int = 5
    views_per_object: int = 20
    input_dim: int = 384
    view_noise: float = 0.02
    hard_view_fraction: float = 0.2
    hard_view_noise: float = 0.15
    object_noise: float = 0.1
    min_angle_degrees: float = 30.0
    clean_per_category: int = 20
    eval_objects_per_category: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in (
            "num_categories",
            "objects_per_category",
            "views_per_object",
            "input_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"gen.{name} must be >= 1, got {getattr(self, name)}")
        if self.clean_per_category < 0 or self.eval_objects_per_category < 0:
            raise ConfigError("gen split sizes must be >= 0")
        if not self.hard_view_noise > self.view_noise >= 0:
            raise ConfigError(
                f"need hard_view_noise > view_noise >= 0, got "
                f"{self.hard_view_noise} and {self.view_noise}"
            )
        if not 0.0 <= self.hard_view_fraction <= 1.0:
            raise ConfigError(f"gen.hard_view_fraction must lie in [0, 1], got {self.hard_view_fraction}")

    @property
    def hard_views_per_object(self) -> int:
        return math.ceil(self.hard_view_fraction * self.views_per_object)


@dataclass(frozen=True)
class DatasetSplits:
    multiview: MultiViewDataset
    clean: MultiViewDataset
    holdout: MultiViewDataset


class Captioner(Protocol):
    def __call__(self, view: ViewRecord, prompt: str) -> str:
        ...


class TemplateCaptioner:
    """Mock of the instruction-following captioner: names the category."""

    def __init__(self, template: str = config.CAPTION_TEMPLATE):
        self.template = template

    def __call__(self, view: ViewRecord, prompt: str) -> str:
        return self.template.format(category=view.category, view_id=view.view_id)


def prompt_for_category(category: str) -> str:
    if not category.strip():
        raise ConfigError("category must be a non-empty string")
    return config.PROMPT_TEMPLATE.format(category=category)


def zero_shot_prompt(category: str) -> str:
    return config.ZERO_SHOT_TEMPLATE.format(category=category)


def mock_caption(view: ViewRecord, captioner: Captioner | None = None) -> str:
    captioner = captioner or TemplateCaptioner()
    return captioner(view, prompt_for_category(view.category))


def category_names(count: int) -> tuple[str, ...]:
    base = config.CATEGORY_NAMES
    return tuple(
        base[i % len(base)] + ("" if i < len(base) else str(i // len(base)))
        for i in range(count)
    )


def generate(spec: GenSpec, captioner: Captioner | None = None) -> MultiViewDataset:
    return generate_splits(spec, captioner).multiview


def generate_splits(spec: GenSpec, captioner: Captioner | None = None) -> DatasetSplits:
    """Training multi-view set, single-view clean set and held-out multi-view
    set, all sharing the same category prototypes."""
    rng = np.random.default_rng(spec.seed)
    names = category_names(spec.num_categories)
    prototypes = _sample_prototypes(spec, rng)

    multiview = _sample_objects(
        spec, rng, names, prototypes, spec.objects_per_category, spec.views_per_object,
        first_object_id=0, hard_views=spec.hard_views_per_object, captioner=captioner,
    )
    next_id = spec.num_categories * spec.objects_per_category
    clean = _sample_objects(
        spec, rng, names, prototypes, spec.clean_per_category, 1,
        first_object_id=next_id, hard_views=0, captioner=captioner,
    )
    next_id += spec.num_categories * spec.clean_per_category
    holdout = _sample_objects(
        spec, rng, names, prototypes, spec.eval_objects_per_category, spec.views_per_object,
        first_object_id=next_id, hard_views=spec.hard_views_per_object, captioner=captioner,
    )
    logger.info(
        "generated %d multi-view, %d clean and %d held-out records",
        len(multiview), len(clean), len(holdout),
    )
    return DatasetSplits(multiview=multiview, clean=clean, holdout=holdout)


def write_dataset(dataset: MultiViewDataset, path: Path) -> int:
    return write_jsonl(path, (_record_to_row(r) for r in dataset.records))


def read_dataset(path: Path) -> MultiViewDataset:
    return MultiViewDataset(
        records=tuple(_row_to_record(line, row) for line, row in read_jsonl(path))
    )


def _sample_prototypes(spec: GenSpec, rng: np.random.Generator) -> Matrix:
    min_cosine = math.cos(math.radians(spec.min_angle_degrees))
    accepted: list[Vector] = []
    for category in range(spec.num_categories):
        for _ in range(MAX_PROTOTYPE_RETRIES):
            candidate = rng.normal(size=spec.input_dim)
            candidate /= np.linalg.norm(candidate)
            if all(float(candidate @ other) <= min_cosine for other in accepted):
                accepted.append(candidate)
                break
        else:
            raise SeparationError(
                f"could not place category {category} at >= {spec.min_angle_degrees} degrees "
                f"from the others after {MAX_PROTOTYPE_RETRIES} draws; "
                "use fewer categories or a lower min_angle_degrees"
            )
    return np.stack(accepted)


def _sample_objects(
    spec: GenSpec,
    rng: np.random.Generator,
    names: tuple[str, ...],
    prototypes: Matrix,
    objects_per_category: int,
    views_per_object: int,
    *,
    first_object_id: int,
    hard_views: int,
    captioner: Captioner | None,
) -> MultiViewDataset:
    records = []
    object_id = first_object_id
    for category, prototype in zip(names, prototypes):
        for _ in range(objects_per_category):
            center = prototype + rng.normal(0.0, spec.object_noise, size=spec.input_dim)
            hard = set(rng.choice(views_per_object, size=hard_views, replace=False).tolist())
            for view_id in range(views_per_object):
                sigma = spec.hard_view_noise if view_id in hard else spec.view_noise
                x = center + rng.normal(0.0, sigma, size=spec.input_dim)
                record = ViewRecord(
                    object_id=object_id,
                    view_id=view_id,
                    category=category,
                    x=x,
                    caption="",
                    is_hard_view=view_id in hard,
                )
                records.append(_with_caption(record, captioner))
            object_id += 1
    return MultiViewDataset(records=tuple(records))


def _with_caption(record: ViewRecord, captioner: Captioner | None) -> ViewRecord:
    return ViewRecord(
        object_id=record.object_id,
        view_id=record.view_id,
        category=record.category,
        x=record.x,
        caption=mock_caption(record, captioner),
        is_hard_view=record.is_hard_view,
    )


def _record_to_row(record: ViewRecord) -> dict:
    return {
        "object_id": record.object_id,
        "view_id": record.view_id,
        "category": record.category,
        "caption": record.caption,
        "hard": record.is_hard_view,
        "x": [float(v) for v in record.x],
    }


def _row_to_record(line_number: int, row: dict) -> ViewRecord:
    missing = [key for key in _RECORD_KEYS if key not in row]
    if missing:
        raise DatasetFormatError(line_number, f"missing keys {', '.join(missing)}")
    try:
        x = np.array(row["x"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(line_number, "x must be a list of numbers") from e
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise DatasetFormatError(line_number, "x must be a flat list of finite numbers")
    for key in ("object_id", "view_id"):
        if not isinstance(row[key], int) or isinstance(row[key], bool):
            raise DatasetFormatError(line_number, f"{key} must be an integer, got {row[key]!r}")
    if not isinstance(row["hard"], bool):
        raise DatasetFormatError(line_number, f"hard must be true or false, got {row['hard']!r}")
    for key in ("category", "caption"):
        if not isinstance(row[key], str) or not row[key].strip():
            raise DatasetFormatError(line_number, f"{key} must be a non-empty string")
    return ViewRecord(
        object_id=row["object_id"],
        view_id=row["view_id"],
        category=row["category"],
        x=x,
        caption=row["caption"],
        is_hard_view=row["hard"],
    )


def write_splits(splits: DatasetSplits, directory: Path) -> dict[str, int]:
    """Writes the three JSONL files; returns records written per file name."""
    directory.mkdir(parents=True, exist_ok=True)
    return {
        name: write_dataset(dataset, directory / name)
        for name, dataset in _split_files(splits)
    }


def read_splits(directory: Path) -> DatasetSplits:
    """The multi-view file is required, the clean and held-out files are optional."""
    multiview_path = directory / config.MULTIVIEW_FILE
    if not multiview_path.is_file():
        raise DatasetError(f"{multiview_path} not found; run the gen command first")
    optional = {}
    for name in (config.CLEAN_FILE, config.EVAL_FILE):
        path = directory / name
        optional[name] = read_dataset(path) if path.is_file() else MultiViewDataset(records=())
    return DatasetSplits(
        multiview=read_dataset(multiview_path),
        clean=optional[config.CLEAN_FILE],
        holdout=optional[config.EVAL_FILE],
    )


def _split_files(splits: DatasetSplits) -> tuple[tuple[str, MultiViewDataset], ...]:
    return (
        (config.MULTIVIEW_FILE, splits.multiview),
        (config.CLEAN_FILE, splits.clean),
        (config.EVAL_FILE, splits.holdout),
    )
