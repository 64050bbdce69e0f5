import logging
import sys

import typer

from omniview_tuning import config
from omniview_tuning import handlers


logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=config.OVT_LOG_LEVEL,
)
logger = logging.getLogger(__name__)


COMMAND_HANDLERS = {
    "gen": handlers.gen,
    "train": handlers.train,
    "eval": handlers.evaluate,
    "gradcheck": handlers.gradcheck,
    "compare": handlers.compare,
    "ablate": handlers.ablate,
}


def build_app() -> typer.Typer:
    app = typer.Typer(
        help="Omniview-Tuning lab: multi-view fine-tuning of a toy vision-language model.",
        add_completion=False,
        no_args_is_help=True,
    )
    for command_name, command_handler in COMMAND_HANDLERS.items():
        app.command(command_name)(command_handler)
    return app


app = build_app()


def main():
    try:
        app()
    except Exception:
        import traceback

        logger.warning(traceback.format_exc())
        sys.exit(1)


if __name__ == "__main__":
    main()
