"""Domain types shared across trace loading, DAG building, judging and reporting."""

import hashlib
import json
from datetime import datetime, timezone
from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator

FORMAT_VERSION = "1.0"


class StepType(StrEnum):
    PLAN = "Plan"
    TOOL_SEL = "ToolSel"
    PARAM_GEN = "ParamGen"
    EXEC = "Exec"
    SYNTH = "Synth"


BUILTIN_STEP_TYPES: tuple[str, ...] = tuple(t.value for t in StepType)


def as_utc(value: datetime) -> datetime:
    """Naive timestamps are read as UTC; aware ones are converted."""
    if value.tzinfo is None:
        return value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

class StepRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    step_id: str
    parent_ids: list[str] = Field(default_factory=list)
    step_type: str
    name: str
    started_at: datetime
    ended_at: datetime
    input: str = ""
    output: str = ""
    reference: str | None = None
    attempt: int | None = Field(default=None, ge=1)
    metadata: dict[str, Any] = Field(default_factory=dict)

    @field_validator("started_at", "ended_at")
    @classmethod
    def _to_utc(cls, value: datetime) -> datetime:
        return as_utc(value)


class Trace(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    trace_id: str
    workflow_id: str
    agent_model: str
    query: str
    created_at: datetime
    steps: list[StepRecord]

    @field_validator("created_at")
    @classmethod
    def _to_utc(cls, value: datetime) -> datetime:
        return as_utc(value)

    def step(self, step_id: str) -> StepRecord | None:
        return next((s for s in self.steps if s.step_id == step_id), None)


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    step_id: str | None
    rule: str
    detail: str = ""


# ---------------------------------------------------------------------------
# Evaluation DAGs
# ---------------------------------------------------------------------------

class DagOrigin(StrEnum):
    SCHEMA_ALIGNED = "SchemaAligned"
    TRACE_INFERRED = "TraceInferred"
    FLAT_FALLBACK = "FlatFallback"


class UnrollEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str  # retry_unroll | branch_resolution | flat_fallback
    node_ids: list[str]
    detail: str = ""


class EvalNode(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    step_type: str
    name: str
    input: str = ""
    output: str = ""
    reference: str | None = None
    context: str | None = None
    source_step_ids: list[str] = Field(min_length=1)
    started_at: datetime
    ended_at: datetime
    attempt: int | None = None
    retry_group: str | None = None
    canonical: bool = True
    declared_parents: list[str] = Field(default_factory=list)
    threshold_override: float | None = None
    metadata: dict[str, Any] = Field(default_factory=dict)


class EvalDAG(BaseModel):
    model_config = ConfigDict(frozen=True)

    trace_id: str
    workflow_id: str = ""
    query: str = ""
    nodes: list[EvalNode]
    edges: list[tuple[str, str]] = Field(default_factory=list)
    origin: DagOrigin = DagOrigin.TRACE_INFERRED
    unroll_log: list[UnrollEvent] = Field(default_factory=list)
    fallback_reason: str | None = None

    def node(self, node_id: str) -> EvalNode | None:
        return next((n for n in self.nodes if n.id == node_id), None)

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def parents(self, node_id: str) -> list[str]:
        return [a for a, b in self.edges if b == node_id]

    def children(self, node_id: str) -> list[str]:
        return [b for a, b in self.edges if a == node_id]

    def terminals(self) -> list[str]:
        sources = {a for a, _ in self.edges}
        return [n.id for n in self.nodes if n.id not in sources]


class SchemaNode(BaseModel):
    key: str | None = None
    match: str = Field(description="Glob over node names (* and ?)")
    step_type: str
    required: bool = True
    threshold_override: float | None = Field(default=None, gt=1.0, lt=5.0)

    @property
    def ref(self) -> str:
        return self.key or f"{self.step_type}:{self.match}"


class DagSchema(BaseModel):
    schema_id: str
    expected_nodes: list[SchemaNode]
    expected_edges: list[tuple[str, str]] = Field(default_factory=list)


class DeviationReport(BaseModel):
    missing_required: list[str] = Field(default_factory=list)
    unexpected_nodes: list[str] = Field(default_factory=list)
    unexpected_edges: list[tuple[str, str]] = Field(default_factory=list)
    missing_edges: list[tuple[str, str]] = Field(default_factory=list)

    @computed_field
    @property
    def deviant(self) -> bool:
        return bool(self.missing_required or self.unexpected_nodes or self.unexpected_edges or self.missing_edges)


# ---------------------------------------------------------------------------
# Verdicts, failures and reports
# ---------------------------------------------------------------------------

class JudgeVerdict(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric_id: str
    score: float = Field(ge=1.0, le=5.0)
    rationale: str = ""
    judge_id: str
    latency: float = Field(default=0.0, ge=0.0, description="Seconds spent producing the verdict")
    cached: bool = False


class FailureLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    level1: str
    level2: str
    level3: str
    rationale: str = ""

    @property
    def path(self) -> str:
        return f"{self.level1}/{self.level2}/{self.level3}"


class AttributionStrategy(StrEnum):
    GREEDY_LOWEST_PARENT = "greedy"
    FULL_PATH_MINIMUM = "fullpath"
    WEIGHTED_PROPAGATION = "weighted"


class EvalMode(StrEnum):
    DAG = "dag"
    FLAT = "flat"
    E2E = "e2e"


class AttributionKind(StrEnum):
    ROOT_CAUSE = "RootCause"
    PROPAGATED = "PropagatedFrom"


class FailureRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: FailureLabel | None = None
    attribution: AttributionKind
    propagated_from: str | None = None
    strategy_used: AttributionStrategy


class NodeResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_id: str
    step_type: str
    name: str
    verdicts: list[JudgeVerdict]
    quality: float
    threshold: float
    flagged: bool
    canonical: bool = True
    failure: FailureRecord | None = None


class PropagationChain(BaseModel):
    model_config = ConfigDict(frozen=True)

    root: str
    nodes: list[str] = Field(default_factory=list, description="Flagged descendants attributed to the root, topological order")

    @property
    def length(self) -> int:
        return len(self.nodes)


class PropagationStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    root_count: int = 0
    propagated_count: int = 0
    mean_chain_length: float | None = None


class ConfigFingerprint(BaseModel):
    model_config = ConfigDict(frozen=True)

    judge_id: str
    metric_pack_hash: str
    thresholds: dict[str, float]
    strategy: AttributionStrategy
    combine: str
    mode: EvalMode

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class EvaluationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    format_version: str = FORMAT_VERSION
    trace_id: str
    workflow_id: str = ""
    mode: EvalMode
    origin: DagOrigin
    fallback_reason: str | None = None
    node_results: list[NodeResult]
    workflow_score: float | None
    deviation: DeviationReport | None = None
    chains: list[PropagationChain] = Field(default_factory=list)
    stats: PropagationStats = Field(default_factory=PropagationStats)
    fingerprint: ConfigFingerprint

    def result(self, node_id: str) -> NodeResult | None:
        return next((r for r in self.node_results if r.node_id == node_id), None)

    def flagged(self) -> list[NodeResult]:
        return [r for r in self.node_results if r.flagged]

    def root_of(self, node_id: str) -> str | None:
        """Follow PropagatedFrom links until a RootCause node is reached."""
        current = self.result(node_id)
        seen: set[str] = set()
        while current is not None and current.failure is not None and current.node_id not in seen:
            seen.add(current.node_id)
            if current.failure.attribution == AttributionKind.ROOT_CAUSE:
                return current.node_id
            current = self.result(current.failure.propagated_from or "")
        return None
