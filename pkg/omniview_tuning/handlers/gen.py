from omniview_tuning.handlers.options import ConfigPath, OutDir, Overrides, Seed, experiment_from_options
from omniview_tuning.handlers.response import reports_errors, send_response
from omniview_tuning.services.synthdata import generate_splits, write_splits
from omniview_tuning.templates import render_template


@reports_errors
def gen(
    config_path: ConfigPath = None,
    seed: Seed = None,
    out: OutDir = None,
    overrides: Overrides = None,
) -> None:
    """Generate the multi-view, clean and held-out synthetic sets as JSONL."""
    experiment = experiment_from_options(config_path, seed, out, overrides)
    counts = write_splits(generate_splits(experiment.gen), experiment.output_dir)
    send_response(
        render_template(
            "gen_summary.j2",
            {
                "seed": experiment.gen.seed,
                "files": [{"name": name, "records": n} for name, n in counts.items()],
                "directory": experiment.output_dir,
            },
        )
    )
