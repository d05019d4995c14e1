"""Report emission: machine-readable documents, console summaries and the static HTML page."""

import json
from functools import lru_cache
from pathlib import Path
from typing import Any

import jinja2
import yaml
from loguru import logger
from pydantic import BaseModel, ValidationError

from ageval.dag import topological_order
from ageval.errors import FormatVersionError
from ageval.models import FORMAT_VERSION, AttributionKind, EvalDAG, EvaluationReport

REPORT_FORMATS = ("json", "yaml")

_NODE_W = 150
_NODE_H = 54
_GAP_X = 60
_GAP_Y = 24


def check_format_version(data: Any, source: str = "document") -> None:
    """Readers accept any minor revision of the current major only."""
    version = data.get("format_version") if isinstance(data, dict) else None
    if version is None:
        raise FormatVersionError(f"{source} has no format_version")
    major = str(version).split(".", 1)[0]
    if major != FORMAT_VERSION.split(".", 1)[0]:
        raise FormatVersionError(f"{source} has format_version {version}, this reader supports {FORMAT_VERSION}")


def dump_document(data: dict[str, Any], fmt: str = "json") -> str:
    if fmt not in REPORT_FORMATS:
        raise FormatVersionError(f"unknown report format {fmt!r}, expected one of {REPORT_FORMATS}")
    if fmt == "yaml":
        return yaml.dump(data, default_flow_style=False, allow_unicode=True, sort_keys=False)
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def write_document(model: BaseModel, path: Path | str, fmt: str = "json") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_document(model.model_dump(mode="json"), fmt), encoding="utf-8")
    return path


def write_report(report: EvaluationReport, out_dir: Path | str, fmt: str = "json") -> Path:
    path = write_document(report, Path(out_dir) / f"{report.trace_id}.report.{fmt}", fmt)
    logger.info(
        "Report written",
        extra={"component": "write_report", "trace_id": report.trace_id, "output_path": str(path), "format": fmt},
    )
    return path


def read_report(path: Path | str) -> EvaluationReport:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise FormatVersionError(f"{path}: unreadable report: {e}") from e
    check_format_version(data, str(path))
    try:
        return EvaluationReport.model_validate(data)
    except ValidationError as e:
        raise FormatVersionError(f"{path}: {e}") from e


def summary_lines(report: EvaluationReport) -> list[str]:
    score = "n/a" if report.workflow_score is None else f"{report.workflow_score:.3f}"
    lines = [
        "=" * 60,
        f"Trace {report.trace_id} ({report.mode.value} mode, {report.origin.value})",
        "=" * 60,
        f"Workflow score: {score}",
        f"Nodes judged: {len(report.node_results)}",
        f"Flagged: {len(report.flagged())}",
        f"Root causes: {report.stats.root_count}",
        f"Propagated: {report.stats.propagated_count}",
    ]
    if report.fallback_reason:
        lines.append(f"Flat fallback: {report.fallback_reason}")
    for chain in report.chains:
        path = " -> ".join([chain.root, *chain.nodes])
        lines.append(f"Chain (length {chain.length}): {path}")
    lines.append("=" * 60)
    return lines


def print_summary(report: EvaluationReport, output_path: Path | str | None = None) -> None:
    try:
        lines = summary_lines(report)
        if output_path is not None:
            lines.insert(3, f"Report: {output_path}")
        print("\n".join(lines))
    except Exception as e:
        logger.warning("Failed to print report summary", extra={"component": "print_summary", "error": str(e)})


# ---------------------------------------------------------------------------
# HTML page
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def _environment() -> jinja2.Environment:
    return jinja2.Environment(
        loader=jinja2.PackageLoader("ageval", "templates"),
        autoescape=jinja2.select_autoescape(["html", "j2"]),
        undefined=jinja2.StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def _layout(dag: EvalDAG) -> dict[str, tuple[int, int]]:
    """Columns by longest path from a source, rows in topological order."""
    order = topological_order(dag)
    depth: dict[str, int] = {}
    for node_id in order:
        depth[node_id] = max((depth[p] + 1 for p in dag.parents(node_id)), default=0)
    rows: dict[int, int] = {}
    positions = {}
    for node_id in order:
        column = depth[node_id]
        row = rows.get(column, 0)
        rows[column] = row + 1
        positions[node_id] = (20 + column * (_NODE_W + _GAP_X), 20 + row * (_NODE_H + _GAP_Y))
    return positions


def _status(report: EvaluationReport, node_id: str) -> str:
    result = report.result(node_id)
    if result is None:
        return "unjudged"
    if result.failure is None:
        return "pass"
    if result.failure.attribution == AttributionKind.ROOT_CAUSE:
        return "root"
    return "propagated"


def render_html(report: EvaluationReport, dag: EvalDAG) -> str:
    """Self-contained page: inline CSS and SVG, no external assets."""
    positions = _layout(dag)
    nodes = []
    for node in dag.nodes:
        x, y = positions[node.id]
        result = report.result(node.id)
        nodes.append(
            {
                "id": node.id,
                "name": node.name,
                "step_type": node.step_type,
                "x": x,
                "y": y,
                "status": _status(report, node.id),
                "quality": None if result is None else f"{result.quality:.2f}",
                "threshold": None if result is None else f"{result.threshold:.2f}",
                "label": None if result is None or result.failure is None or result.failure.label is None else result.failure.label.path,
                "propagated_from": None if result is None or result.failure is None else result.failure.propagated_from,
            }
        )
    edges = []
    for a, b in dag.edges:
        (ax, ay), (bx, by) = positions[a], positions[b]
        edges.append(
            {"x1": ax + _NODE_W, "y1": ay + _NODE_H // 2, "x2": bx, "y2": by + _NODE_H // 2,
             "attributed": any(n["id"] == b and n["propagated_from"] == a for n in nodes)}
        )
    width = max((x for x, _ in positions.values()), default=0) + _NODE_W + 40
    height = max((y for _, y in positions.values()), default=0) + _NODE_H + 40

    template = _environment().get_template("report.html.j2")
    return template.render(
        report=report,
        nodes=nodes,
        edges=edges,
        width=width,
        height=height,
        node_w=_NODE_W,
        node_h=_NODE_H,
        failures=[r for r in report.node_results if r.failure is not None],
        score="n/a" if report.workflow_score is None else f"{report.workflow_score:.3f}",
    )


def write_html(report: EvaluationReport, dag: EvalDAG, path: Path | str) -> Path | None:
    """Side output: failures are logged, never raised."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_html(report, dag), encoding="utf-8")
    except Exception as e:
        logger.error(
            "Failed to write report page",
            extra={"component": "write_html", "output_path": str(path), "error": str(e)},
            exc_info=True,
        )
        return None
    logger.info("Report page written", extra={"component": "write_html", "output_path": str(path)})
    return path
