from typing import Annotated

import typer

from omniview_tuning import config
from omniview_tuning.handlers.options import ConfigPath, OutDir, Overrides, Seed, experiment_from_options
from omniview_tuning.handlers.response import reports_errors, send_response
from omniview_tuning.services.exceptions import ConfigError
from omniview_tuning.services.experiment import compare_sampling_modes
from omniview_tuning.storage import write_csv
from omniview_tuning.templates import render_template


COMPARE_COLUMNS = ("seed", "sampling_mode", *config.SUMMARY_COLUMNS)


@reports_errors
def compare(
    config_path: ConfigPath = None,
    seed: Seed = None,
    out: OutDir = None,
    overrides: Overrides = None,
    seeds: Annotated[str, typer.Option(help="Comma-separated seeds.")] = "0,1,2,3,4",
) -> None:
    """Train ovt, ros and raos with identical budgets per seed; writes compare.csv
    with one row per (seed, mode) and a median row per mode."""
    experiment = experiment_from_options(config_path, seed, out, overrides)
    seed_list = parse_seeds(seeds)
    rows = compare_sampling_modes(experiment, seed_list)
    experiment.output_dir.mkdir(parents=True, exist_ok=True)
    path = experiment.output_dir / config.COMPARE_FILE
    write_csv(path, COMPARE_COLUMNS, rows)
    send_response(
        render_template(
            "compare_summary.j2",
            {
                "seeds": seed_list,
                "medians": [row for row in rows if row["seed"] == "median"],
                "path": path,
            },
        )
    )


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from e
