import logging
from pathlib import Path
from typing import Literal

from jinja2 import Environment, FileSystemLoader, StrictUndefined, select_autoescape

from artifacts import canonical_json, write_atomic
from pipeline import IssueHierarchy

# Configure logging
logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"

_environment = Environment(
    loader=FileSystemLoader(TEMPLATE_DIR),
    autoescape=select_autoescape(["html"]),
    undefined=StrictUndefined,
    keep_trailing_newline=True,
)


def _timestamp(ms: int) -> str:
    hours, rest = divmod(int(ms), 3_600_000)
    minutes, rest = divmod(rest, 60_000)
    seconds, millis = divmod(rest, 1000)
    return f"{hours:02d}:{minutes:02d}:{seconds:02d}.{millis:03d}"


_environment.filters["timestamp"] = _timestamp


def render_json(hierarchy: IssueHierarchy) -> str:
    return canonical_json(hierarchy.to_dict())


def render_html(hierarchy: IssueHierarchy) -> str:
    """Static page: contexts, then categories, then clusters with the medoid first"""
    template = _environment.get_template("report.html")
    return template.render(hierarchy=hierarchy.to_dict())


def export_report(hierarchy: IssueHierarchy, format: Literal["json", "html"], path) -> Path:
    if format == "json":
        text = render_json(hierarchy)
    elif format == "html":
        text = render_html(hierarchy)
    else:
        raise ValueError(f"unknown report format {format!r}")
    written = write_atomic(path, text)
    logger.info(f"Report written to {written} ({format}, {len(hierarchy.contexts)} contexts)")
    return written
