import functools

import typer

from omniview_tuning.services.exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DatasetFormatError,
    DimensionError,
    FrozenWeightsModified,
    NonFiniteError,
    NormalizationError,
    SeparationError,
)


DOMAIN_ERRORS = (
    CheckpointError,
    ConfigError,
    DatasetError,
    DatasetFormatError,
    DimensionError,
    FrozenWeightsModified,
    NonFiniteError,
    NormalizationError,
    SeparationError,
    OSError,
)


def send_response(response: str) -> None:
    typer.echo(response)


def send_error(message: str) -> None:
    typer.secho(f"error: {message}", fg=typer.colors.RED, err=True)


def reports_errors(handler):
    """Turns domain failures into a one-line error and exit code 1."""

    @functools.wraps(handler)
    def wrapped(*args, **kwargs):
        try:
            return handler(*args, **kwargs)
        except DOMAIN_ERRORS as e:
            send_error(str(e))
            raise typer.Exit(1) from e

    return wrapped
