from pathlib import Path
from typing import Annotated, Optional

import typer

from omniview_tuning import config
from omniview_tuning.handlers.options import (
    ConfigPath,
    DataDir,
    OutDir,
    Overrides,
    Seed,
    experiment_from_options,
)
from omniview_tuning.handlers.response import reports_errors, send_response
from omniview_tuning.services.evaluation import build_report
from omniview_tuning.services.exceptions import DatasetError
from omniview_tuning.services.model import load_checkpoint
from omniview_tuning.services.synthdata import read_dataset
from omniview_tuning.storage import write_json
from omniview_tuning.templates import render_template


CheckpointPath = Annotated[
    Optional[Path],
    typer.Option("--checkpoint", help="Checkpoint to evaluate [default: <out>/checkpoint.ovt]."),
]


@reports_errors
def evaluate(
    config_path: ConfigPath = None,
    seed: Seed = None,
    out: OutDir = None,
    overrides: Overrides = None,
    data: DataDir = None,
    checkpoint: CheckpointPath = None,
) -> None:
    """Zero-shot accuracy, invariance and Acc@beta of a checkpoint on the held-out set."""
    experiment = experiment_from_options(config_path, seed, out, overrides)
    state = load_checkpoint(checkpoint or experiment.output_dir / config.CHECKPOINT_FILE)
    eval_path = (data or experiment.output_dir) / config.EVAL_FILE
    if not eval_path.is_file():
        raise DatasetError(f"{eval_path} not found; run the gen command first")

    settings = experiment.eval
    report = build_report(
        state,
        read_dataset(eval_path),
        epsilon=settings.epsilon,
        betas=settings.betas,
        adaptive_beta=settings.adaptive_beta,
        top_k=settings.top_k,
    )
    experiment.output_dir.mkdir(parents=True, exist_ok=True)
    report_path = experiment.output_dir / config.REPORT_FILE
    write_json(report_path, report)
    send_response(render_template("eval_report.j2", {"report": report, "report_path": report_path}))
