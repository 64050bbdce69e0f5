from pathlib import Path
from typing import Annotated, List, Optional

import typer

from omniview_tuning.services.experiment import ExperimentConfig, load_experiment


ConfigPath = Annotated[
    Optional[Path], typer.Option("--config", help="Experiment manifest (JSON).")
]
Seed = Annotated[
    Optional[int], typer.Option("--seed", help="Overrides gen.seed and train.seed.")
]
OutDir = Annotated[Optional[Path], typer.Option("--out", help="Output directory.")]
Overrides = Annotated[
    Optional[List[str]],
    typer.Option("--set", help="section.field=value override (repeatable)."),
]
DataDir = Annotated[
    Optional[Path],
    typer.Option("--data", help="Directory with the generated JSONL files [default: output dir]."),
]


def experiment_from_options(
    config_path: Path | None,
    seed: int | None,
    out: Path | None,
    overrides: list[str] | None,
) -> ExperimentConfig:
    return load_experiment(config_path, overrides or (), seed, out)
