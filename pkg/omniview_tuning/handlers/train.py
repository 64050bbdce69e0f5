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
from omniview_tuning.services.model import parameter_counts
from omniview_tuning.services.synthdata import read_splits
from omniview_tuning.services.trainer import train_from_scratch
from omniview_tuning.storage import write_csv, write_json
from omniview_tuning.templates import render_template


@reports_errors
def train(
    config_path: ConfigPath = None,
    seed: Seed = None,
    out: OutDir = None,
    overrides: Overrides = None,
    data: DataDir = None,
) -> None:
    """Pretrain the base encoders, then fine-tune adapters and VIFormer.

    Writes checkpoint.ovt and metrics.csv with the columns epoch, itc_loss,
    vc_loss, total_loss, mean_intra_object_distance, outlier_mean_distance,
    zero_shot_top1, seconds (empty unless train.record_wall_time is true).
    """
    experiment = experiment_from_options(config_path, seed, out, overrides)
    splits = read_splits(data or experiment.output_dir)
    out_dir = experiment.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / config.CHECKPOINT_FILE
    metrics_path = out_dir / config.METRICS_FILE

    write_json(out_dir / config.RESOLVED_CONFIG_FILE, experiment.to_json())
    result = train_from_scratch(experiment.train, splits, checkpoint_path)
    write_csv(
        metrics_path,
        config.METRICS_COLUMNS,
        result.log.rows(experiment.train.record_wall_time),
    )
    send_response(
        render_template(
            "train_summary.j2",
            {
                "epochs": experiment.train.epochs,
                "sampling_mode": experiment.train.sampling_mode,
                "counts": parameter_counts(result.state),
                "first": result.log.first,
                "last": result.log.last,
                "metrics_path": metrics_path,
                "checkpoint_path": checkpoint_path,
            },
        )
    )
