import jinja2

from omniview_tuning import config


def render_template(template_name: str, data: dict | None = None) -> str:
    """Renders a console report; `<br>` breaks lines, `{INDENT}` indents."""
    template = _get_template_env().get_template(template_name)
    lines = template.render(**(data or {})).replace("\n", " ").split("<br>")
    return "\n".join(
        " ".join(line.split()).replace("{INDENT}", "    ") for line in lines
    ).strip()


def _get_template_env() -> jinja2.Environment:
    if not getattr(_get_template_env, "template_env", None):
        template_loader = jinja2.FileSystemLoader(searchpath=config.TEMPLATES_DIR)
        env = jinja2.Environment(
            loader=template_loader,
            trim_blocks=True,
            lstrip_blocks=True,
            undefined=jinja2.StrictUndefined,
        )
        env.filters["metric"] = _format_metric
        setattr(_get_template_env, "template_env", env)
    return getattr(_get_template_env, "template_env")


def _format_metric(value: float | None, digits: int = 4) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}f}"
