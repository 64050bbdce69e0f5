from typing import Annotated

import typer

from omniview_tuning.handlers.options import ConfigPath, Overrides, Seed, experiment_from_options
from omniview_tuning.handlers.response import reports_errors, send_response
from omniview_tuning.services.gradcheck import corrupt_gradients, run_gradient_suite
from omniview_tuning.templates import render_template


@reports_errors
def gradcheck(
    config_path: ConfigPath = None,
    seed: Seed = None,
    overrides: Overrides = None,
    configurations: Annotated[int, typer.Option(min=1, help="Random configurations per check.")] = 20,
    tolerance: Annotated[float, typer.Option(help="Maximum relative error.")] = 1e-4,
    corrupt_gradient: Annotated[bool, typer.Option(hidden=True)] = False,
) -> None:
    """Finite-difference check of the ITC, VC and composite gradients; exits 1 on failure."""
    experiment = experiment_from_options(config_path, seed, None, overrides)
    suite = run_gradient_suite(
        configurations=configurations,
        seed=experiment.train.seed,
        tolerance=tolerance,
        gradient_hook=corrupt_gradients if corrupt_gradient else None,
    )
    send_response(
        render_template(
            "gradcheck_table.j2",
            {
                "configurations": configurations,
                "tolerance": tolerance,
                "maxima": suite.group_maxima(),
                "passed": suite.passed,
            },
        )
    )
    if not suite.passed:
        raise typer.Exit(1)
