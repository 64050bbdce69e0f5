"""Experiment manifests: one JSON file with gen/train/eval sections plus
command-line overrides, and the multi-run sweeps built on them."""
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from omniview_tuning import config
from omniview_tuning.services.exceptions import ConfigError
from omniview_tuning.services.synthdata import GenSpec, generate_splits
from omniview_tuning.services.trainer import TrainConfig, final_summary, train_from_scratch


logger = logging.getLogger(__name__)

SECTIONS = ("gen", "train", "eval")
SAMPLING_MODES = ("ovt", "ros", "raos")
TOP_LEVEL_KEYS = (*SECTIONS, "output_dir")
DEFAULT_OUTPUT_DIR = "runs/default"


@dataclass(frozen=True)
class EvalSettings:
    epsilon: float = 0.1
    betas: tuple[float, ...] = (1.0, 0.5)
    adaptive_beta: bool = True
    top_k: tuple[int, ...] = (1, 5)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"eval.epsilon must be >= 0, got {self.epsilon}")
        for beta in self.betas:
            if not -1.0 <= beta <= 1.0:
                raise ConfigError(f"eval.betas entries must lie in [-1, 1], got {beta}")
        if not self.top_k or min(self.top_k) < 1:
            raise ConfigError(f"eval.top_k entries must be >= 1, got {list(self.top_k)}")


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenSpec = field(default_factory=GenSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: Path = Path(DEFAULT_OUTPUT_DIR)

    def to_json(self) -> dict:
        return {
            "gen": asdict(self.gen),
            "train": asdict(self.train),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.eval).items()},
            "output_dir": str(self.output_dir),
        }


def load_experiment(
    path: Path | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
    output_dir: Path | None = None,
) -> ExperimentConfig:
    """Reads the manifest (defaults when `path` is None) and applies
    `section.field=value` overrides, then the seed and output overrides."""
    raw: dict[str, Any] = _read_manifest(path) if path is not None else {}
    for override in overrides:
        _apply_override(raw, override)
    if seed is not None:
        for section in ("gen", "train"):
            raw.setdefault(section, {})["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    return experiment_from_dict(raw)


def experiment_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(f"unknown config key {key}")
    try:
        return ExperimentConfig(
            gen=_build_section(GenSpec, raw.get("gen", {}), "gen"),
            train=_build_section(TrainConfig, raw.get("train", {}), "train"),
            eval=_build_section(EvalSettings, raw.get("eval", {}), "eval"),
            output_dir=Path(raw.get("output_dir", DEFAULT_OUTPUT_DIR)),
        )
    except TypeError as e:
        raise ConfigError(f"invalid config value: {e}") from e


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _read_manifest(path: Path) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def _apply_override(raw: dict[str, Any], override: str) -> None:
    key, separator, value = override.partition("=")
    if not separator:
        raise ConfigError(f"override {override!r} must look like section.field=value")
    key = key.strip()
    if key == "output_dir":
        raw["output_dir"] = value
        return
    section, dot, name = key.partition(".")
    if not dot or section not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key}")
    raw.setdefault(section, {})[name] = parse_value(value)


def _build_section(cls, values: Any, section: str):
    if not isinstance(values, Mapping):
        raise ConfigError(f"config section {section} must be an object")
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


def compare_sampling_modes(experiment: ExperimentConfig, seeds: Sequence[int]) -> list[dict]:
    """Final metrics of ovt/ros/raos under identical budgets, per seed, plus
    one median row per mode."""
    if not seeds:
        raise ConfigError("compare needs at least one seed")
    rows = []
    for seed in seeds:
        splits = generate_splits(replace(experiment.gen, seed=seed))
        for mode in SAMPLING_MODES:
            cfg = replace(experiment.train, seed=seed, sampling_mode=mode)
            logger.info("compare: seed %d, sampling mode %s", seed, mode)
            summary = final_summary(train_from_scratch(cfg, splits).log)
            rows.append({"seed": seed, "sampling_mode": mode, **summary})
    for mode in SAMPLING_MODES:
        mode_rows = [row for row in rows if row["sampling_mode"] == mode]
        rows.append(
            {
                "seed": "median",
                "sampling_mode": mode,
                **{c: float(np.median([r[c] for r in mode_rows])) for c in config.SUMMARY_COLUMNS},
            }
        )
    return rows


def ablate(experiment: ExperimentConfig, param: str, values: Sequence[Any]) -> list[dict]:
    if param not in {f.name for f in fields(TrainConfig)}:
        raise ConfigError(f"unknown config key train.{param}")
    if not values:
        raise ConfigError("ablate needs at least one value")
    splits = generate_splits(experiment.gen)
    rows = []
    for value in values:
        try:
            cfg = replace(experiment.train, **{param: value})
        except TypeError as e:
            raise ConfigError(f"invalid value {value!r} for train.{param}") from e
        logger.info("ablate: %s = %r", param, value)
        summary = final_summary(train_from_scratch(cfg, splits).log)
        rows.append({"param": param, "value": value, **summary})
    return rows
