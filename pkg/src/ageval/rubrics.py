"""Metric registry, rubric texts, calibration anchors and per-type thresholds."""

import hashlib
import json
from importlib.resources import files
from pathlib import Path
from typing import Any

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ageval.errors import MetricPackError, UnregisteredStepTypeError
from ageval.models import EvalNode, StepType

SCORE_LEVELS = (1, 2, 3, 4, 5)

DEFAULT_THRESHOLDS: dict[str, float] = {
    StepType.PLAN: 3.0,
    StepType.TOOL_SEL: 3.0,
    StepType.PARAM_GEN: 2.5,
    StepType.EXEC: 3.0,
    StepType.SYNTH: 3.0,
}


class CalibrationAnchor(BaseModel):
    model_config = ConfigDict(frozen=True)

    example_context: str
    example_output: str
    score: int = Field(ge=1, le=5)
    rationale: str


class MetricSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric_id: str = Field(description="Dotted id, e.g. synth.faithfulness")
    step_type: str
    name: str
    description: str = ""
    rubric: list[str] = Field(description="Level descriptions ordered from score 5 down to score 1")
    anchors: list[CalibrationAnchor]

    @field_validator("rubric")
    @classmethod
    def _five_levels(cls, value: list[str]) -> list[str]:
        if len(value) != 5 or any(not level.strip() for level in value):
            raise ValueError("rubric needs 5 non-empty levels (5 down to 1)")
        return value

    @model_validator(mode="after")
    def _stratified(self) -> "MetricSpec":
        scores = sorted(a.score for a in self.anchors)
        if tuple(scores) != SCORE_LEVELS:
            raise ValueError(f"anchors of {self.metric_id} must cover scores 1..5 exactly once, got {scores}")
        return self

    def rubric_for(self, score: int) -> str:
        return self.rubric[5 - score]


class MetricRegistry(BaseModel):
    """Immutable mapping step type -> ordered metric set."""

    model_config = ConfigDict(frozen=True)

    metrics: list[MetricSpec]

    @model_validator(mode="after")
    def _unique_ids(self) -> "MetricRegistry":
        ids = [m.metric_id for m in self.metrics]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate metric ids: {', '.join(duplicates)}")
        return self

    @property
    def step_types(self) -> list[str]:
        return list(dict.fromkeys(m.step_type for m in self.metrics))

    def metrics_for(self, step_type: str) -> list[MetricSpec]:
        found = [m for m in self.metrics if m.step_type == step_type]
        if not found:
            raise UnregisteredStepTypeError(step_type)
        return found

    def metric(self, metric_id: str) -> MetricSpec | None:
        return next((m for m in self.metrics if m.metric_id == metric_id), None)

    @property
    def content_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.metrics)


class ThresholdConfig(BaseModel):
    """Per-type flagging thresholds; a node is flagged when q < threshold."""

    model_config = ConfigDict(frozen=True)

    thresholds: dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    default: float = 3.0

    @field_validator("thresholds")
    @classmethod
    def _open_interval(cls, value: dict[str, float]) -> dict[str, float]:
        for step_type, threshold in value.items():
            if not 1.0 < threshold < 5.0:
                raise ValueError(f"threshold for {step_type} must lie in (1.0, 5.0), got {threshold}")
        return value

    def for_type(self, step_type: str) -> float:
        return self.thresholds.get(step_type, self.default)

    def threshold_for(self, node: EvalNode) -> float:
        if node.threshold_override is not None:
            return node.threshold_override
        return self.for_type(node.step_type)


def _read_yaml(path: Path | str) -> Any:
    try:
        return yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise MetricPackError(f"cannot read {path}: {e}") from e


def _parse_specs(data: Any, source: str) -> list[MetricSpec]:
    if isinstance(data, dict):
        data = data.get("metrics", [])
    if not isinstance(data, list):
        raise MetricPackError(f"{source}: expected a list of metric records")
    try:
        return [MetricSpec.model_validate(item) for item in data]
    except ValidationError as e:
        raise MetricPackError(f"{source}: {e}") from e


def builtin_registry() -> MetricRegistry:
    text = files("ageval").joinpath("data/metrics.yaml").read_text(encoding="utf-8")
    return MetricRegistry(metrics=_parse_specs(yaml.safe_load(text), "built-in pack"))


def load_metric_pack(path: Path | str, base: MetricRegistry | None = None) -> MetricRegistry:
    """Overlay a pack on the base registry (built-in by default), keyed by metric_id."""
    base = base if base is not None else builtin_registry()
    overlay = _parse_specs(_read_yaml(path), str(path))

    merged = {m.metric_id: m for m in base.metrics}
    for spec in overlay:
        merged[spec.metric_id] = spec

    try:
        registry = MetricRegistry(metrics=list(merged.values()))
    except ValidationError as e:
        raise MetricPackError(f"{path}: {e}") from e

    logger.info(
        "Metric pack loaded",
        extra={
            "component": "load_metric_pack",
            "path": str(path),
            "metrics": len(registry),
            "step_types": registry.step_types,
        },
    )
    return registry


def load_thresholds(path: Path | str | None = None) -> ThresholdConfig:
    """Read a {step_type: threshold} file overlaid on the shipped defaults."""
    if path is None:
        return ThresholdConfig()
    data = _read_yaml(path) or {}
    if not isinstance(data, dict):
        raise MetricPackError(f"{path}: expected a mapping of step type to threshold")
    default = data.pop("default", 3.0)
    try:
        return ThresholdConfig(thresholds={**DEFAULT_THRESHOLDS, **data}, default=default)
    except ValidationError as e:
        raise MetricPackError(f"{path}: {e}") from e
