"""Versioned regression suites: runs, the run store, dual-threshold detection and CI gating.

Run store layout::

    <root>/index.json            # append-only list of run summaries
    <root>/runs/<sha256>.json    # one RunRecord per file, named by content
    <root>/.lock                 # advisory writer lock
"""

import hashlib
import json
import os
import time
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from datetime import datetime, timezone
from enum import StrEnum
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, computed_field, model_validator

from ageval.dag import apply_schema, infer_dag, load_schema, normalize
from ageval.engine import EvaluationContext, evaluate_trace
from ageval.errors import AgevalError, CaseResolutionError, RegressionError, SuiteMismatchError
from ageval.models import FORMAT_VERSION, AttributionKind, ConfigFingerprint, DagSchema, EvaluationReport, Trace
from ageval.statkit import DEFAULT_RESAMPLES, paired_bootstrap_test
from ageval.traces import load_trace_file, serialize_trace

SUITE_SCOPE = "suite"
STEP_SCOPE_PREFIX = "step_type:"
DEFAULT_SMOKE_SIZE = 10
INDEX_FILE = "index.json"
LOCK_FILE = ".lock"


class Tier(StrEnum):
    SMOKE = "smoke"
    FULL = "full"


class Severity(StrEnum):
    CRITICAL = "Critical"
    WARNING = "Warning"
    INFO = "Info"


class GateOutcome(StrEnum):
    PASS = "Pass"
    WARN = "Warn"
    FAIL = "Fail"
    BLOCKED = "Blocked"
    ERROR = "Error"


# ---------------------------------------------------------------------------
# Suite definition
# ---------------------------------------------------------------------------

class CaseSpec(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    case_id: str
    trace: str | None = Field(default=None, description="Trace file, relative to the suite file")
    generator: str | None = Field(default=None, description="Generator spec file, relative to the suite file")
    index: int = Field(default=0, ge=0, description="Case index within the generated corpus")
    schema_path: str | None = Field(default=None, alias="schema")
    tolerance: float = Field(default=0.5, ge=0.0, description="Allowed drop of the case workflow score")

    @model_validator(mode="after")
    def _one_source(self) -> "CaseSpec":
        if (self.trace is None) == (self.generator is None):
            raise ValueError(f"case {self.case_id!r} needs exactly one of 'trace' or 'generator'")
        return self


class TierSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    smoke: list[str] | None = None
    smoke_size: int = Field(default=DEFAULT_SMOKE_SIZE, ge=1)


class AlertPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_multiplier: float = Field(default=2.0, ge=0.0)
    p_threshold: float = Field(default=0.05, gt=0.0, lt=1.0)
    min_history: int = Field(default=5, ge=1)
    window: int = Field(default=10, ge=1)
    resamples: int = Field(default=DEFAULT_RESAMPLES, ge=100)
    seed: int = Field(default=0, ge=0)
    bonferroni: bool = True
    critical_case_share: float = Field(default=0.2, gt=0.0, le=1.0)


class SuiteSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    suite_id: str
    cases: list[CaseSpec] = Field(min_length=1)
    tiers: TierSpec = Field(default_factory=TierSpec)
    policy: AlertPolicy = Field(default_factory=AlertPolicy)

    @model_validator(mode="after")
    def _consistent(self) -> "SuiteSpec":
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("case ids must be unique")
        if self.tiers.smoke is not None:
            unknown = set(self.tiers.smoke) - set(ids)
            if unknown:
                raise ValueError(f"smoke tier names unknown cases: {sorted(unknown)}")
        return self

    def case_ids(self, tier: Tier) -> list[str]:
        if tier == Tier.FULL:
            return [c.case_id for c in self.cases]
        if self.tiers.smoke is not None:
            return list(self.tiers.smoke)
        return [c.case_id for c in self.cases[: self.tiers.smoke_size]]

    def case(self, case_id: str) -> CaseSpec:
        return next(c for c in self.cases if c.case_id == case_id)


def load_suite(path: Path | str) -> SuiteSpec:
    try:
        return SuiteSpec.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as e:
        raise RegressionError(f"cannot read suite {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise RegressionError(f"invalid suite {path}: {e}") from e


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class CaseResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    case_id: str
    trace_id: str
    workflow_score: float | None
    node_scores: dict[str, float]
    step_type_scores: dict[str, float] = Field(description="Mean quality per step type, propagated failures excluded")
    flagged: list[str] = Field(default_factory=list)
    roots: list[str] = Field(default_factory=list)
    tolerance: float = 0.5


class RunRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    format_version: str = FORMAT_VERSION
    run_id: str
    suite_id: str
    tier: Tier
    timestamp: datetime
    fingerprint: ConfigFingerprint
    tags: dict[str, str] = Field(default_factory=dict, description="Agent-side configuration: model, prompt, tools")
    cases: list[CaseResult] = Field(min_length=1)

    @computed_field
    @property
    def mean_score(self) -> float | None:
        scores = [c.workflow_score for c in self.cases if c.workflow_score is not None]
        return float(np.mean(scores)) if scores else None

    def case(self, case_id: str) -> CaseResult | None:
        return next((c for c in self.cases if c.case_id == case_id), None)


def case_result(case_id: str, report: EvaluationReport, tolerance: float) -> CaseResult:
    local: dict[str, list[float]] = {}
    for r in report.node_results:
        if r.failure is not None and r.failure.attribution == AttributionKind.PROPAGATED:
            continue
        local.setdefault(r.step_type, []).append(r.quality)
    return CaseResult(
        case_id=case_id,
        trace_id=report.trace_id,
        workflow_score=report.workflow_score,
        node_scores={r.node_id: r.quality for r in report.node_results},
        step_type_scores={t: float(np.mean(v)) for t, v in sorted(local.items())},
        flagged=[r.node_id for r in report.flagged()],
        roots=[c.root for c in report.chains],
        tolerance=tolerance,
    )


def _report_key(trace: Trace, schema: DagSchema | None, ctx: EvaluationContext) -> str:
    payload = serialize_trace(trace) + (schema.model_dump_json() if schema else "") + ctx.fingerprint().digest()
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def record_run(
    suite_id: str,
    cases: Sequence[tuple[str, Trace, DagSchema | None, float]],
    ctx: EvaluationContext,
    tier: Tier | str = Tier.FULL,
    run_id: str | None = None,
    timestamp: datetime | None = None,
    tags: Mapping[str, str] | None = None,
    report_cache: dict[str, EvaluationReport] | None = None,
) -> RunRecord:
    """Evaluate already-resolved cases into a RunRecord (not persisted).

    With ``report_cache`` an identical trace under an identical evaluator
    configuration reuses its earlier report.
    """
    results = []
    for case_id, trace, schema, tolerance in cases:
        key = _report_key(trace, schema, ctx) if report_cache is not None else None
        report = report_cache.get(key) if report_cache is not None else None
        if report is None:
            dag = normalize(infer_dag(trace))
            deviation = None
            if schema is not None:
                dag, deviation = apply_schema(dag, schema)
            report = evaluate_trace(dag, ctx, deviation)
            if report_cache is not None:
                report_cache[key] = report
        results.append(case_result(case_id, report, tolerance))

    timestamp = timestamp or datetime.now(timezone.utc)
    tier = Tier(tier)
    return RunRecord(
        run_id=run_id or f"{suite_id}-{tier.value}-{timestamp:%Y%m%dT%H%M%S%f}",
        suite_id=suite_id,
        tier=tier,
        timestamp=timestamp,
        fingerprint=ctx.fingerprint(),
        tags=dict(tags or {}),
        cases=results,
    )


def resolve_cases(
    spec: SuiteSpec,
    tier: Tier,
    base_dir: Path | str = ".",
    ctx: EvaluationContext | None = None,
) -> list[tuple[str, Trace, DagSchema | None, float]]:
    """Load every case of the tier up front; the first unresolvable case aborts."""
    from ageval import harness  # noqa: PLC0415

    base = Path(base_dir)
    registry = ctx.registry if ctx is not None else None
    genspecs: dict[str, harness.GenSpec] = {}
    resolved = []
    for case_id in spec.case_ids(tier):
        case = spec.case(case_id)
        try:
            if case.trace is not None:
                trace = load_trace_file(base / case.trace, registry)
            else:
                if case.generator not in genspecs:
                    genspecs[case.generator] = harness.load_genspec(base / case.generator)
                trace, _ = harness.generate_case(genspecs[case.generator], case.index)
            schema = load_schema(base / case.schema_path) if case.schema_path else None
        except (OSError, AgevalError) as e:
            logger.error(
                "Cannot resolve case",
                extra={"component": "resolve_cases", "suite_id": spec.suite_id, "case_id": case_id, "error": str(e)},
            )
            raise CaseResolutionError(case_id, str(e)) from e
        resolved.append((case_id, trace, schema, case.tolerance))
    return resolved


def run_suite(
    spec: SuiteSpec,
    tier: Tier | str,
    ctx: EvaluationContext,
    store: "RunStore | None" = None,
    base_dir: Path | str = ".",
    run_id: str | None = None,
    tags: Mapping[str, str] | None = None,
    timestamp: datetime | None = None,
) -> RunRecord:
    """Evaluate the tier's cases and persist the run; nothing is stored if any case fails."""
    tier = Tier(tier)
    cases = resolve_cases(spec, tier, base_dir, ctx)
    record = record_run(spec.suite_id, cases, ctx, tier, run_id=run_id, timestamp=timestamp, tags=tags)
    if store is not None:
        store.append(record)
    logger.info(
        "Suite run finished",
        extra={
            "component": "run_suite",
            "suite_id": spec.suite_id,
            "tier": tier.value,
            "run_id": record.run_id,
            "cases": len(record.cases),
            "mean_score": record.mean_score,
        },
    )
    return record


# ---------------------------------------------------------------------------
# Run store
# ---------------------------------------------------------------------------

class RunIndexEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    suite_id: str
    tier: Tier
    timestamp: datetime
    fingerprint: str
    file: str


class RunStore:
    """Append-only directory of RunRecord files; one writer at a time."""

    def __init__(self, root: Path | str, lock_timeout: float = 10.0) -> None:
        self.root = Path(root)
        self.lock_timeout = lock_timeout

    @property
    def index_path(self) -> Path:
        return self.root / INDEX_FILE

    @contextmanager
    def _lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / LOCK_FILE
        deadline = time.monotonic() + self.lock_timeout
        while True:
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise RegressionError(f"run store {self.root} is locked by another writer ({path})") from None
                time.sleep(0.05)
        try:
            os.write(fd, str(os.getpid()).encode())
            yield
        finally:
            os.close(fd)
            path.unlink(missing_ok=True)

    def index(self) -> list[RunIndexEntry]:
        if not self.index_path.exists():
            return []
        try:
            data = json.loads(self.index_path.read_text(encoding="utf-8"))
            return [RunIndexEntry.model_validate(e) for e in data]
        except (json.JSONDecodeError, ValidationError) as e:
            raise RegressionError(f"corrupt run index {self.index_path}: {e}") from e

    def append(self, record: RunRecord) -> Path:
        payload = json.dumps(record.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
        relative = f"runs/{digest}.json"
        with self._lock():
            entries = self.index()
            if any(e.run_id == record.run_id for e in entries):
                raise RegressionError(f"run {record.run_id!r} already stored")
            path = self.root / relative
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(payload, encoding="utf-8")
            entries.append(
                RunIndexEntry(
                    run_id=record.run_id,
                    suite_id=record.suite_id,
                    tier=record.tier,
                    timestamp=record.timestamp,
                    fingerprint=record.fingerprint.digest(),
                    file=relative,
                )
            )
            tmp = self.index_path.with_suffix(".tmp")
            tmp.write_text(
                json.dumps([e.model_dump(mode="json") for e in entries], indent=2) + "\n", encoding="utf-8"
            )
            tmp.replace(self.index_path)
        logger.info(
            "Run persisted",
            extra={"component": "RunStore", "run_id": record.run_id, "suite_id": record.suite_id, "file": relative},
        )
        return path

    def load(self, run_id: str) -> RunRecord:
        entry = next((e for e in self.index() if e.run_id == run_id), None)
        if entry is None:
            raise RegressionError(f"unknown run {run_id!r}")
        return self._read(entry)

    def _read(self, entry: RunIndexEntry) -> RunRecord:
        try:
            data = json.loads((self.root / entry.file).read_text(encoding="utf-8"))
            return RunRecord.model_validate(data)
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            raise RegressionError(f"cannot read run {entry.run_id!r}: {e}") from e

    def runs(self, suite_id: str, tier: Tier | str | None = None) -> list[RunRecord]:
        """Stored runs of a suite, oldest first."""
        return [
            self._read(e) for e in self.index()
            if e.suite_id == suite_id and (tier is None or e.tier == Tier(tier))
        ]


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

class ScopeEvidence(BaseModel):
    model_config = ConfigDict(frozen=True)

    scope: str
    current: float
    baseline: float
    drop: float
    sigma: float
    p_value: float
    p_threshold: float
    alerted: bool


class RegressionAlert(BaseModel):
    model_config = ConfigDict(frozen=True)

    suite_id: str
    run_id: str
    scope: str
    drop: float
    sigma: float
    p_value: float
    severity: Severity
    localized: list[str] = Field(default_factory=list, description="Step types ordered by mean drop")
    cases_exceeding: list[str] = Field(default_factory=list)


class DetectionResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    alert: RegressionAlert | None
    reason: str
    history_runs: int
    scopes: list[ScopeEvidence] = Field(default_factory=list)


def _step_mean(run: RunRecord, step_type: str) -> float | None:
    values = [c.step_type_scores[step_type] for c in run.cases if step_type in c.step_type_scores]
    return float(np.mean(values)) if values else None


def _evaluate_scope(
    scope: str,
    current: float | None,
    history_values: list[float | None],
    pairs: list[tuple[float, float]],
    policy: AlertPolicy,
    p_threshold: float,
) -> ScopeEvidence | None:
    values = [v for v in history_values if v is not None]
    if current is None or not values:
        return None
    baseline = float(np.mean(values))
    sigma = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    drop = baseline - current
    p_value = 1.0
    if pairs:
        p_value = paired_bootstrap_test(
            [b for b, _ in pairs], [c for _, c in pairs], resamples=policy.resamples, seed=policy.seed
        )
    return ScopeEvidence(
        scope=scope,
        current=current,
        baseline=baseline,
        drop=drop,
        sigma=sigma,
        p_value=p_value,
        p_threshold=p_threshold,
        alerted=drop > policy.sigma_multiplier * sigma and p_value < p_threshold,
    )


def detect_regression(current: RunRecord, history: Sequence[RunRecord], policy: AlertPolicy | None = None) -> DetectionResult:
    """Dual-threshold check of ``current`` against comparable history.

    A scope alerts only when its drop exceeds sigma_multiplier x the standard
    deviation of historical means AND the paired bootstrap against the most
    recent comparable run is significant.
    """
    policy = policy or AlertPolicy()
    foreign = sorted({h.suite_id for h in history if h.suite_id != current.suite_id})
    if foreign:
        raise SuiteMismatchError(f"run {current.run_id!r} belongs to suite {current.suite_id!r}, history contains {foreign[0]!r}")

    epoch = current.fingerprint.digest()
    comparable = [
        h for h in history
        if h.fingerprint.digest() == epoch and h.tier == current.tier and h.run_id != current.run_id
    ][-policy.window :]
    if len(comparable) < policy.min_history:
        logger.warning(
            "Insufficient history for regression detection",
            extra={
                "component": "detect_regression",
                "suite_id": current.suite_id,
                "comparable": len(comparable),
                "min_history": policy.min_history,
            },
        )
        return DetectionResult(alert=None, reason="insufficient history", history_runs=len(comparable))

    latest = comparable[-1]
    shared = [c for c in current.cases if latest.case(c.case_id) is not None]

    scopes: list[ScopeEvidence] = []
    suite_pairs = [
        (latest.case(c.case_id).workflow_score, c.workflow_score)
        for c in shared
        if c.workflow_score is not None and latest.case(c.case_id).workflow_score is not None
    ]
    suite = _evaluate_scope(
        SUITE_SCOPE, current.mean_score, [h.mean_score for h in comparable], suite_pairs, policy, policy.p_threshold
    )
    if suite is not None:
        scopes.append(suite)

    step_types = sorted({t for c in current.cases for t in c.step_type_scores})
    step_threshold = policy.p_threshold / len(step_types) if policy.bonferroni and step_types else policy.p_threshold
    for step_type in step_types:
        pairs = [
            (latest.case(c.case_id).step_type_scores[step_type], c.step_type_scores[step_type])
            for c in shared
            if step_type in c.step_type_scores and step_type in latest.case(c.case_id).step_type_scores
        ]
        evidence = _evaluate_scope(
            f"{STEP_SCOPE_PREFIX}{step_type}",
            _step_mean(current, step_type),
            [_step_mean(h, step_type) for h in comparable],
            pairs,
            policy,
            step_threshold,
        )
        if evidence is not None:
            scopes.append(evidence)

    alerted = [s for s in scopes if s.alerted]
    if not alerted:
        logger.info(
            "No regression",
            extra={"component": "detect_regression", "suite_id": current.suite_id, "run_id": current.run_id},
        )
        return DetectionResult(alert=None, reason="no regression", history_runs=len(comparable), scopes=scopes)

    type_scopes = [s for s in scopes if s.scope.startswith(STEP_SCOPE_PREFIX)]
    ranked = sorted((s for s in type_scopes if s.alerted), key=lambda s: -s.drop)
    if not ranked:
        ranked = sorted((s for s in type_scopes if s.drop > 0), key=lambda s: -s.drop)[:1]
    localized = [s.scope.removeprefix(STEP_SCOPE_PREFIX) for s in ranked]

    exceeding = [
        c.case_id for c in shared
        if c.workflow_score is not None
        and latest.case(c.case_id).workflow_score is not None
        and latest.case(c.case_id).workflow_score - c.workflow_score > c.tolerance
    ]
    suite_alerted = suite is not None and suite.alerted
    if suite_alerted or len(exceeding) >= policy.critical_case_share * len(current.cases):
        severity = Severity.CRITICAL
    elif exceeding:
        severity = Severity.WARNING
    else:
        severity = Severity.INFO

    lead = suite if suite_alerted else next(s for s in alerted if s.scope.startswith(STEP_SCOPE_PREFIX))
    alert = RegressionAlert(
        suite_id=current.suite_id,
        run_id=current.run_id,
        scope=lead.scope,
        drop=lead.drop,
        sigma=lead.sigma,
        p_value=lead.p_value,
        severity=severity,
        localized=localized,
        cases_exceeding=exceeding,
    )
    logger.warning(
        "Regression detected",
        extra={
            "component": "detect_regression",
            "suite_id": current.suite_id,
            "run_id": current.run_id,
            "scope": alert.scope,
            "severity": severity.value,
            "localized": localized,
        },
    )
    return DetectionResult(alert=alert, reason="regression", history_runs=len(comparable), scopes=scopes)


# ---------------------------------------------------------------------------
# Gating
# ---------------------------------------------------------------------------

class GateResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    format_version: str = FORMAT_VERSION
    suite_id: str
    outcome: GateOutcome
    smoke_run_id: str | None = None
    full_run_id: str | None = None
    smoke: DetectionResult | None = None
    full: DetectionResult | None = None
    error: str | None = None


def outcome_for(alert: RegressionAlert | None) -> GateOutcome:
    if alert is None or alert.severity == Severity.INFO:
        return GateOutcome.PASS
    if alert.severity == Severity.WARNING:
        return GateOutcome.WARN
    return GateOutcome.FAIL


def check_run(store: RunStore, suite_id: str, tier: Tier | str, policy: AlertPolicy, run_id: str | None = None) -> DetectionResult:
    """Detect on a stored run (the latest of the tier by default) against the runs stored before it."""
    runs = store.runs(suite_id, tier)
    if not runs:
        raise RegressionError(f"no stored {Tier(tier).value} runs for suite {suite_id!r}")
    position = len(runs) - 1 if run_id is None else next((i for i, r in enumerate(runs) if r.run_id == run_id), None)
    if position is None:
        raise RegressionError(f"unknown run {run_id!r}")
    return detect_regression(runs[position], runs[:position], policy)


def progressive_gate(
    spec: SuiteSpec,
    ctx: EvaluationContext,
    store: RunStore,
    base_dir: Path | str = ".",
    tags: Mapping[str, str] | None = None,
    timestamp: datetime | None = None,
) -> GateResult:
    """Smoke tier first; a smoke alert of Warning or worse blocks the full tier."""
    smoke_run = run_suite(spec, Tier.SMOKE, ctx, store, base_dir, tags=tags, timestamp=timestamp)
    smoke = detect_regression(smoke_run, [r for r in store.runs(spec.suite_id, Tier.SMOKE) if r.run_id != smoke_run.run_id], spec.policy)
    if smoke.alert is not None and smoke.alert.severity in (Severity.WARNING, Severity.CRITICAL):
        logger.warning(
            "Smoke tier blocked the full suite",
            extra={"component": "progressive_gate", "suite_id": spec.suite_id, "severity": smoke.alert.severity.value},
        )
        return GateResult(
            suite_id=spec.suite_id,
            outcome=GateOutcome.BLOCKED,
            smoke_run_id=smoke_run.run_id,
            smoke=smoke,
        )

    full_run = run_suite(spec, Tier.FULL, ctx, store, base_dir, tags=tags, timestamp=timestamp)
    full = detect_regression(full_run, [r for r in store.runs(spec.suite_id, Tier.FULL) if r.run_id != full_run.run_id], spec.policy)
    outcome = outcome_for(full.alert)
    logger.info(
        "Gate finished",
        extra={"component": "progressive_gate", "suite_id": spec.suite_id, "outcome": outcome.value},
    )
    return GateResult(
        suite_id=spec.suite_id,
        outcome=outcome,
        smoke_run_id=smoke_run.run_id,
        full_run_id=full_run.run_id,
        smoke=smoke,
        full=full,
    )


def ci_verdict(outcome: GateOutcome | str) -> int:
    """Process exit code: 0 pass, 1 blocking regression, 2 warning, 3 infrastructure error."""
    return {
        GateOutcome.PASS: 0,
        GateOutcome.FAIL: 1,
        GateOutcome.BLOCKED: 1,
        GateOutcome.WARN: 2,
        GateOutcome.ERROR: 3,
    }[GateOutcome(outcome)]


def write_outcome(result: GateResult, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
