from typing import Annotated

import typer

from omniview_tuning import config
from omniview_tuning.handlers.options import ConfigPath, OutDir, Overrides, Seed, experiment_from_options
from omniview_tuning.handlers.response import reports_errors, send_response
from omniview_tuning.services.experiment import ablate as run_ablation
from omniview_tuning.services.experiment import parse_value
from omniview_tuning.storage import write_csv
from omniview_tuning.templates import render_template


ABLATION_COLUMNS = ("param", "value", *config.SUMMARY_COLUMNS)


@reports_errors
def ablate(
    param: Annotated[str, typer.Option(help="TrainConfig field to sweep, e.g. lam or k.")],
    values: Annotated[str, typer.Option(help="Comma-separated values (JSON literals).")],
    config_path: ConfigPath = None,
    seed: Seed = None,
    out: OutDir = None,
    overrides: Overrides = None,
) -> None:
    """Sweep one training hyperparameter on a single dataset; writes ablation.csv."""
    experiment = experiment_from_options(config_path, seed, out, overrides)
    parsed = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
    rows = run_ablation(experiment, param, parsed)
    experiment.output_dir.mkdir(parents=True, exist_ok=True)
    path = experiment.output_dir / config.ABLATION_FILE
    write_csv(path, ABLATION_COLUMNS, rows)
    send_response(render_template("ablation_summary.j2", {"param": param, "rows": rows, "path": path}))
