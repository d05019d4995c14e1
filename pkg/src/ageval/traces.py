"""Trace file loading, validation and serialization (``*.trace.json``)."""

import json
from collections import Counter
from collections.abc import Iterable
from pathlib import Path
from typing import TYPE_CHECKING

from loguru import logger
from pydantic import ValidationError

from ageval.errors import DanglingParentError, TraceSchemaError, TraceSyntaxError, TraceValidationError
from ageval.models import BUILTIN_STEP_TYPES, Trace, Violation

if TYPE_CHECKING:
    from ageval.rubrics import MetricRegistry

TRACE_SUFFIX = ".trace.json"


def _known_types(registry: "MetricRegistry | None") -> set[str]:
    return set(registry.step_types) if registry is not None else set(BUILTIN_STEP_TYPES)


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"])
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def load_trace(raw: bytes | str, registry: "MetricRegistry | None" = None) -> Trace:
    """Parse a trace document and enforce every Trace/StepRecord invariant.

    Raises TraceSyntaxError for malformed text, TraceSchemaError for missing
    fields or unregistered step types, DanglingParentError for parent ids that
    name no step, and TraceValidationError for any remaining violation.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TraceSyntaxError(f"invalid utf-8: {e.reason}", 1, e.start + 1) from e

    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise TraceSyntaxError(e.msg, e.lineno, e.colno) from e

    if not isinstance(data, dict):
        raise TraceSchemaError("trace document must be an object")

    try:
        trace = Trace.model_validate(data)
    except ValidationError as e:
        raise TraceSchemaError(_describe(e)) from e

    known = _known_types(registry)
    for step in trace.steps:
        if step.step_type not in known:
            raise TraceSchemaError(f"step {step.step_id!r} has unregistered step_type {step.step_type!r}")

    step_ids = {s.step_id for s in trace.steps}
    for step in trace.steps:
        for parent_id in step.parent_ids:
            if parent_id not in step_ids:
                raise DanglingParentError(step.step_id, parent_id)

    violations = validate_trace(trace, registry)
    if violations:
        raise TraceValidationError(trace.trace_id, violations)

    logger.debug(
        "Trace loaded",
        extra={"component": "load_trace", "trace_id": trace.trace_id, "steps": len(trace.steps)},
    )
    return trace


def validate_trace(trace: Trace, registry: "MetricRegistry | None" = None) -> list[Violation]:
    """Return every invariant violation; an empty list means the trace is valid."""
    violations: list[Violation] = []

    if not trace.trace_id:
        violations.append(Violation(step_id=None, rule="empty trace_id"))
    if not trace.steps:
        violations.append(Violation(step_id=None, rule="no steps"))

    counts = Counter(s.step_id for s in trace.steps)
    for step_id, count in counts.items():
        if not step_id:
            violations.append(Violation(step_id=None, rule="empty step_id"))
        elif count > 1:
            violations.append(Violation(step_id=step_id, rule="duplicate id", detail=f"{count} occurrences"))

    known = _known_types(registry) if registry is not None else None
    for step in trace.steps:
        if step.started_at > step.ended_at:
            violations.append(Violation(step_id=step.step_id, rule="timestamp order"))
        for parent_id in step.parent_ids:
            if parent_id not in counts:
                violations.append(Violation(step_id=step.step_id, rule="dangling parent", detail=parent_id))
        if known is not None and step.step_type not in known:
            violations.append(Violation(step_id=step.step_id, rule="unregistered step type", detail=step.step_type))

    return violations


def serialize_trace(trace: Trace) -> str:
    return trace.model_dump_json(indent=2)


def load_trace_file(path: str | Path, registry: "MetricRegistry | None" = None) -> Trace:
    return load_trace(Path(path).read_bytes(), registry)


def load_trace_batch(raws: Iterable[bytes | str], registry: "MetricRegistry | None" = None) -> list[Trace]:
    """Load several traces; trace ids must be unique within the batch."""
    traces = [load_trace(raw, registry) for raw in raws]
    seen: set[str] = set()
    for trace in traces:
        if trace.trace_id in seen:
            raise TraceSchemaError(f"duplicate trace_id {trace.trace_id!r} in batch")
        seen.add(trace.trace_id)
    return traces
