"""Synthetic trace corpora with injected, taxonomy-labeled failures and their ground truth.

The generator is oracle-mode only: injected failures are written into step
outputs as ``FAIL::<leaf>`` (root) and ``CORRUPT::<root id>`` (propagated)
markers that the shipped rule set keys on, so detection and attribution can
be measured exactly.
"""

import json
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from functools import lru_cache
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ageval.dag import apply_schema, infer_dag, normalize
from ageval.engine import EvaluationContext, evaluate_trace
from ageval.errors import HarnessError
from ageval.judge import RuleJudge, load_rules
from ageval.models import (
    DagOrigin,
    DagSchema,
    DeviationReport,
    EvalDAG,
    EvalMode,
    EvaluationReport,
    SchemaNode,
    StepRecord,
    StepType,
    Trace,
)
from ageval.rubrics import builtin_registry
from ageval.statkit import DetectionTruth, bootstrap_ci, detection_metrics, rca_hop_distance, rng
from ageval.taxonomy import Taxonomy, load_taxonomy
from ageval.traces import TRACE_SUFFIX, serialize_trace

Shape = Literal["chain", "diamond", "wide-branch", "mixed"]
SHAPES: tuple[str, ...] = ("chain", "diamond", "wide-branch")

GROUND_TRUTH_FILE = "ground_truth.json"
_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)

# Where each Level-2 category can be injected.
CATEGORY_STEP_TYPES: dict[str, tuple[str, ...]] = {
    "goal_misinterpretation": (StepType.PLAN,),
    "missing_steps": (StepType.PLAN,),
    "incorrect_ordering": (StepType.PLAN,),
    "wrong_tool_selection": (StepType.TOOL_SEL,),
    "parameter_errors": (StepType.PARAM_GEN,),
    "api_tool_failures": (StepType.EXEC,),
    "context_loss": (StepType.EXEC, StepType.SYNTH),
    "output_hallucination": (StepType.SYNTH,),
    "premature_termination": (StepType.SYNTH,),
}

# Category used when a step type is degraded directly.
DEGRADATION_CATEGORY: dict[str, str] = {
    StepType.PLAN: "missing_steps",
    StepType.TOOL_SEL: "wrong_tool_selection",
    StepType.PARAM_GEN: "parameter_errors",
    StepType.EXEC: "api_tool_failures",
    StepType.SYNTH: "output_hallucination",
}

DEFAULT_AMPLIFICATION: dict[str, float] = {
    "context_loss": 0.95,
    "api_tool_failures": 0.6,
    "parameter_errors": 0.6,
}
_FALLBACK_AMPLIFICATION = 0.8

# Latent slots; everything a case needs is drawn up front so runs share random numbers.
_SHAPE, _BLOCKS, _FAIL, _LEAF, _NODE, _MULTI, _FAIL2, _NODE2, _LEAF2 = range(9)
_NONDAG, _NONDAG_KIND, _NONDAG_POS, _ATTEMPTS, _TIE = range(9, 14)
_DEVIANT, _DEV_KIND, _DEV_POS, _SUPPRESS, _SUPPRESS2 = range(14, 19)
_PROPAGATE = 32
_DEGRADE = 160
_DEGRADE_LEAF = 288
MAX_NODES = 128
LATENT_SIZE = _DEGRADE_LEAF + MAX_NODES
_STRUCTURAL = [_SHAPE, _BLOCKS, _NONDAG, _NONDAG_KIND, _NONDAG_POS, _ATTEMPTS, _TIE, _DEVIANT, _DEV_KIND, _DEV_POS]
_JITTER_STREAM = 7919


class GenSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "syn"
    shape: Shape = "chain"
    min_blocks: int = Field(default=1, ge=1)
    max_blocks: int = Field(default=2, ge=1)
    width: int = Field(default=3, ge=2, description="Parallel branches per block for wide-branch workflows")
    failure_mix: dict[str, float] | None = Field(default=None, description="Level-2 id -> probability; default from taxonomy frequencies")
    amplification: dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_AMPLIFICATION))
    non_dag_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    multi_root_rate: float = Field(default=0.05, ge=0.0, le=1.0)
    deviation_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    deviant_failure_multiplier: float = Field(default=2.1, ge=1.0)
    injected_degradation: dict[str, float] = Field(default_factory=dict, description="Step type -> extra per-node failure probability")
    improvement: float = Field(default=0.0, ge=0.0, le=1.0, description="Probability an injected root failure is suppressed")
    jitter: float = Field(default=0.0, ge=0.0, le=1.0, description="Per-run probability of redrawing each failure latent")
    edge: bool = False
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "GenSpec":
        if self.max_blocks < self.min_blocks:
            raise ValueError("max_blocks must be >= min_blocks")
        if self.failure_mix is not None:
            if any(p < 0 for p in self.failure_mix.values()):
                raise ValueError("failure_mix probabilities must be non-negative")
            if sum(self.failure_mix.values()) > 1.0 + 1e-9:
                raise ValueError("failure_mix probabilities must sum to at most 1")
            unknown = set(self.failure_mix) - set(CATEGORY_STEP_TYPES)
            if unknown:
                raise ValueError(f"unknown failure categories: {sorted(unknown)}")
        for step_type, rate in self.injected_degradation.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"degradation for {step_type} must lie in [0, 1]")
        return self

    def resolved_mix(self, taxonomy: Taxonomy) -> dict[str, float]:
        if self.failure_mix is not None:
            mix = {k: self.failure_mix.get(k, 0.0) for k in CATEGORY_STEP_TYPES}
        else:
            freqs = taxonomy.level2_frequencies()
            mix = {k: freqs.get(k, 0.0) / 100.0 for k in CATEGORY_STEP_TYPES}
        if self.edge:
            # Rarer categories become likelier; total failure mass is unchanged.
            total = sum(mix.values())
            inverse = {k: 1.0 / p for k, p in mix.items() if p > 0}
            norm = sum(inverse.values())
            mix = {k: total * inverse.get(k, 0.0) / norm for k in mix} if norm else mix
        return mix

    def amplification_for(self, category: str) -> float:
        return self.amplification.get(category, _FALLBACK_AMPLIFICATION)


class GroundTruth(BaseModel):
    model_config = ConfigDict(frozen=True)

    trace_id: str
    workflow_id: str
    shape: str
    blocks: int
    failing: list[str] = Field(default_factory=list)
    labels: dict[str, str] = Field(default_factory=dict, description="Root node id -> Level-3 leaf")
    roots: list[str] = Field(default_factory=list)
    propagated: dict[str, list[str]] = Field(default_factory=dict)
    true_root: dict[str, str] = Field(default_factory=dict)
    convergent: list[str] = Field(default_factory=list)
    deviant: bool = False
    non_dag: str | None = None
    masked: bool = False


def load_genspec(path: Path | str) -> GenSpec:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return GenSpec.model_validate(data)
    except (OSError, yaml.YAMLError, ValidationError) as e:
        raise HarnessError(f"invalid generator spec {path}: {e}") from e


@lru_cache(maxsize=1)
def _builtin_taxonomy() -> Taxonomy:
    return load_taxonomy()


# ---------------------------------------------------------------------------
# Workflow templates
# ---------------------------------------------------------------------------

@dataclass
class _Slot:
    name: str
    step_type: str
    parents: list[str]


def workflow_template(shape: str, blocks: int, width: int = 3) -> list[_Slot]:
    """Named steps of a synthetic workflow, in topological order."""
    if shape not in SHAPES:
        raise HarnessError(f"unknown workflow shape {shape!r}")
    slots = [_Slot("plan", StepType.PLAN, [])]
    tails = ["plan"]
    lanes = 1 if shape == "chain" else 2 if shape == "diamond" else width

    for block in range(1, blocks + 1):
        ends = []
        for lane in range(lanes):
            suffix = f"{block}" if lanes == 1 else f"{block}{chr(ord('a') + lane)}"
            slots.append(_Slot(f"select_tool_{suffix}", StepType.TOOL_SEL, list(tails)))
            slots.append(_Slot(f"gen_params_{suffix}", StepType.PARAM_GEN, [f"select_tool_{suffix}"]))
            slots.append(_Slot(f"call_api_{suffix}", StepType.EXEC, [f"gen_params_{suffix}"]))
            ends.append(f"call_api_{suffix}")
        if lanes > 1 and block < blocks:
            slots.append(_Slot(f"merge_{block}", StepType.SYNTH, ends))
            tails = [f"merge_{block}"]
        else:
            tails = ends
    slots.append(_Slot("answer", StepType.SYNTH, tails))
    return slots


def schema_for(shape: str, blocks: int, width: int = 3) -> DagSchema:
    """Expected DAG of an undeviated synthetic workflow."""
    slots = workflow_template(shape, blocks, width)
    return DagSchema(
        schema_id=f"syn-{shape}-{blocks}",
        expected_nodes=[SchemaNode(key=s.name, match=s.name, step_type=s.step_type) for s in slots],
        expected_edges=[(p, s.name) for s in slots for p in s.parents],
    )


def _deviate(slots: list[_Slot], u: np.ndarray) -> list[_Slot]:
    if u[_DEV_KIND] < 0.5:
        candidates = [s for s in slots if s.step_type == StepType.PARAM_GEN]
        skipped = candidates[int(u[_DEV_POS] * len(candidates))]
        kept = []
        for slot in slots:
            if slot is skipped:
                continue
            parents = []
            for p in slot.parents:
                parents.extend(skipped.parents if p == skipped.name else [p])
            kept.append(_Slot(slot.name, slot.step_type, parents))
        return kept

    anchors = [s for s in slots[:-1] if s.step_type == StepType.EXEC]
    anchor = anchors[int(u[_DEV_POS] * len(anchors))]
    extra = _Slot("extra_lookup", StepType.TOOL_SEL, [anchor.name])
    terminal = slots[-1]
    return [*slots[:-1], extra, _Slot(terminal.name, terminal.step_type, [*terminal.parents, extra.name])]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _latents(spec: GenSpec, index: int, run_seed: int | None) -> np.ndarray:
    u = rng(spec.seed, index).random(LATENT_SIZE)
    if run_seed is not None and spec.jitter > 0:
        jr = rng(spec.seed, index, _JITTER_STREAM, run_seed)
        mask = jr.random(LATENT_SIZE) < spec.jitter
        mask[_STRUCTURAL] = False
        u = np.where(mask, jr.random(LATENT_SIZE), u)
    return u


def _pick_category(mix: Mapping[str, float], u: float) -> str | None:
    acc = 0.0
    for category, p in mix.items():
        acc += p
        if u < acc:
            return category
    return None


def _pick_leaf(taxonomy: Taxonomy, category: str, u: float) -> str:
    leaves = [leaf.id for _, l2, leaf in taxonomy.leaves() if l2 == category]
    if not leaves:
        raise HarnessError(f"taxonomy has no leaves under {category!r}")
    return leaves[min(int(u * len(leaves)), len(leaves) - 1)]


def _pick_slot(slots: list[_Slot], category: str, u: float, exclude: set[str]) -> str | None:
    terminal = slots[-1].name
    candidates = [
        s.name for s in slots
        if s.step_type in CATEGORY_STEP_TYPES[category]
        and s.name not in exclude
        and not (category == "context_loss" and s.name == terminal)
    ]
    if not candidates:
        return None
    return candidates[min(int(u * len(candidates)), len(candidates) - 1)]


def _related(slots: list[_Slot], name: str) -> set[str]:
    parents = {s.name: s.parents for s in slots}
    children: dict[str, list[str]] = {s.name: [] for s in slots}
    for s in slots:
        for p in s.parents:
            children[p].append(s.name)

    def reach(start: str, step: Mapping[str, list[str]]) -> set[str]:
        seen, stack = set(), [start]
        while stack:
            for nxt in step[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    return {name} | reach(name, parents) | reach(name, children)


def _clean_output(slot: _Slot, index: int) -> str:
    match slot.step_type:
        case StepType.PLAN:
            return "1. pick a tool 2. build parameters 3. call the api 4. answer the user"
        case StepType.TOOL_SEL:
            return f"use search_api for {slot.name}"
        case StepType.PARAM_GEN:
            return json.dumps({"query": f"request {index}", "limit": 10})
        case StepType.EXEC:
            return "200 OK: 3 results returned"
        case _:
            return f"Answer to request {index} based on retrieved results"


def generate_case(
    spec: GenSpec,
    index: int,
    taxonomy: Taxonomy | None = None,
    run_seed: int | None = None,
) -> tuple[Trace, GroundTruth]:
    """Build case ``index`` of the corpus described by ``spec``.

    ``run_seed`` selects a jittered realization of the same case for
    repeated regression runs; None gives the base realization.
    """
    taxonomy = taxonomy or _builtin_taxonomy()
    u = _latents(spec, index, run_seed)

    shape = spec.shape if spec.shape != "mixed" else SHAPES[min(int(u[_SHAPE] * 3), 2)]
    lo, hi = spec.min_blocks, spec.max_blocks + (2 if spec.edge else 0)
    blocks = lo + min(int(u[_BLOCKS] * (hi - lo + 1)), hi - lo)
    width = spec.width + (1 if spec.edge else 0)
    slots = workflow_template(shape, blocks, width)

    deviant = bool(u[_DEVIANT] < spec.deviation_rate)
    if deviant:
        slots = _deviate(slots, u)
    if len(slots) > MAX_NODES:
        raise HarnessError(f"workflow of {len(slots)} steps exceeds {MAX_NODES}")
    position = {s.name: j for j, s in enumerate(slots)}

    mix = spec.resolved_mix(taxonomy)
    total = sum(mix.values())
    if deviant and total > 0:
        factor = min(spec.deviant_failure_multiplier, 1.0 / total)
        mix = {k: p * factor for k, p in mix.items()}

    roots: dict[str, str] = {}
    first = _pick_category(mix, u[_FAIL])
    if first is not None and u[_SUPPRESS] >= spec.improvement:
        node = _pick_slot(slots, first, u[_NODE], set())
        if node is not None:
            roots[node] = _pick_leaf(taxonomy, first, u[_LEAF])

    if roots and total > 0 and u[_MULTI] < spec.multi_root_rate:
        second = _pick_category({k: p / sum(mix.values()) for k, p in mix.items()}, u[_FAIL2])
        if second is not None and u[_SUPPRESS2] >= spec.improvement:
            node = _pick_slot(slots, second, u[_NODE2], _related(slots, next(iter(roots))))
            if node is not None:
                roots[node] = _pick_leaf(taxonomy, second, u[_LEAF2])

    for j, slot in enumerate(slots):
        rate = spec.injected_degradation.get(slot.step_type, 0.0)
        if rate > 0 and slot.name not in roots and u[_DEGRADE + j] < rate:
            roots[slot.name] = _pick_leaf(taxonomy, DEGRADATION_CATEGORY[slot.step_type], u[_DEGRADE_LEAF + j])

    # Propagation in template order; the true root follows the lowest-scoring failing parent.
    true_root: dict[str, str] = {}
    sources: dict[str, list[str]] = {}
    convergent: list[str] = []
    for j, slot in enumerate(slots):
        failing_parents = [p for p in slot.parents if p in true_root]
        if slot.name in roots:
            true_root[slot.name] = slot.name
            if failing_parents:
                convergent.append(slot.name)
            continue
        if not failing_parents:
            continue
        amp = max(spec.amplification_for(taxonomy.level2_of(roots[true_root[p]]) or "") for p in failing_parents)
        if u[_PROPAGATE + j] < amp:
            best = min(failing_parents, key=lambda p: (1 if p in roots else 2, position[p]))
            true_root[slot.name] = true_root[best]
            sources[slot.name] = sorted({true_root[p] for p in failing_parents}, key=position.__getitem__)
            if len(sources[slot.name]) > 1:
                convergent.append(slot.name)

    ids = {s.name: f"n{j:02d}" for j, s in enumerate(slots)}

    def output_of(slot: _Slot) -> str:
        text = _clean_output(slot, index)
        if slot.name in roots:
            return f"FAIL::{roots[slot.name]} {text}"
        if slot.name in sources:
            markers = " ".join(f"CORRUPT::{ids[r]}" for r in sources[slot.name])
            return f"{markers} {text}"
        return text

    steps: list[dict] = []
    for slot in slots:
        metadata: dict = {"synthetic": True, "subtask": slot.name.replace("_", " ")}
        if slot.step_type == StepType.TOOL_SEL:
            metadata["available_tools"] = ["search_api", "weather_api", "calendar_api", "calculator"]
        steps.append(
            {
                "slot": slot.name,
                "step_id": ids[slot.name],
                "parent_ids": [ids[p] for p in slot.parents],
                "step_type": str(slot.step_type),
                "name": slot.name,
                "output": output_of(slot),
                "metadata": metadata,
            }
        )

    failing_slots = {s: ids[true_root[s]] for s in true_root}
    extra_failing: dict[str, str] = {}
    non_dag: str | None = None
    tie_with: tuple[int, int] | None = None

    if u[_NONDAG] < spec.non_dag_rate:
        terminal = slots[-1].name
        if u[_NONDAG_KIND] < 0.5:
            candidates = [i for i, st in enumerate(steps) if st["step_type"] != StepType.PLAN and st["slot"] != terminal]
            at = candidates[min(int(u[_NONDAG_POS] * len(candidates)), len(candidates) - 1)]
            attempts = 2 + min(int(u[_ATTEMPTS] * 3), 2)
            if u[_TIE] < 0.1:
                attempts = 6 + min(int(u[_ATTEMPTS] * 2), 1)
            non_dag = "retry_overflow" if attempts > 5 else "retry"
            final = steps[at]
            final["attempt"] = attempts
            corrupted = final["slot"] in sources
            earlier = []
            for k in range(1, attempts):
                step_id = f"{final['step_id']}r{k}"
                text = "transient error, retrying"
                if corrupted:
                    text = f"CORRUPT::{ids[true_root[final['slot']]]} {text}"
                    extra_failing[step_id] = ids[true_root[final["slot"]]]
                earlier.append({**final, "step_id": step_id, "attempt": k, "output": text, "metadata": dict(final["metadata"])})
            steps[at:at] = earlier
        else:
            selectors = [i for i, st in enumerate(steps) if st["step_type"] == StepType.TOOL_SEL]
            at = selectors[min(int(u[_NONDAG_POS] * len(selectors)), len(selectors) - 1)]
            selector = steps[at]
            execs = [
                i for i, st in enumerate(steps)
                if st["step_type"] == StepType.EXEC and position[st["slot"]] > position[selector["slot"]]
            ]
            if execs:
                target = execs[0]
                # Re-selection after execution: the selector also reads the executor's result.
                selector["parent_ids"] = [*selector["parent_ids"], steps[target]["step_id"]]
                non_dag = "branch"
                if u[_TIE] < 0.15:
                    non_dag = "branch_tied"
                    tie_with = (at, target)

    created = _EPOCH + timedelta(hours=index)
    starts = [created + timedelta(seconds=2 * k) for k in range(len(steps))]
    if tie_with is not None:
        starts[tie_with[1]] = starts[tie_with[0]]

    records = [
        StepRecord(
            step_id=st["step_id"],
            parent_ids=st["parent_ids"],
            step_type=st["step_type"],
            name=st["name"],
            started_at=starts[k],
            ended_at=starts[k] + timedelta(seconds=1),
            input=st["metadata"]["subtask"],
            output=st["output"],
            attempt=st.get("attempt"),
            metadata=st["metadata"],
        )
        for k, st in enumerate(steps)
    ]
    trace = Trace(
        trace_id=f"{spec.name}-{index:04d}",
        workflow_id=f"syn-{shape}",
        agent_model="synthetic-agent",
        query=f"Synthetic {shape} request #{index}",
        created_at=created,
        steps=records,
    )

    order = [st["step_id"] for st in steps]
    truth_roots = {ids[s]: ids[s] for s in roots}
    all_failing = {ids[s]: r for s, r in failing_slots.items()} | extra_failing
    propagated: dict[str, list[str]] = {ids[r]: [] for r in roots}
    for node_id in order:
        root = all_failing.get(node_id)
        if root is not None and node_id not in truth_roots:
            propagated[root].append(node_id)
    terminal_id = ids[slots[-1].name]

    truth = GroundTruth(
        trace_id=trace.trace_id,
        workflow_id=trace.workflow_id,
        shape=shape,
        blocks=blocks,
        failing=[n for n in order if n in all_failing],
        labels={ids[s]: leaf for s, leaf in roots.items()},
        roots=[n for n in order if n in truth_roots],
        propagated=propagated,
        true_root={n: all_failing[n] for n in order if n in all_failing},
        convergent=[ids[s] for s in convergent],
        deviant=deviant,
        non_dag=non_dag,
        masked=bool(all_failing) and terminal_id not in all_failing,
    )
    return trace, truth


def generate(
    spec: GenSpec,
    n: int,
    taxonomy: Taxonomy | None = None,
    run_seed: int | None = None,
) -> list[tuple[Trace, GroundTruth]]:
    """Deterministic corpus: case i always comes from stream (seed, i)."""
    if n < 0:
        raise HarnessError("corpus size must be non-negative")
    corpus = [generate_case(spec, i, taxonomy, run_seed) for i in range(n)]
    logger.info(
        "Corpus generated",
        extra={
            "component": "generate",
            "name": spec.name,
            "seed": spec.seed,
            "traces": n,
            "failing_traces": sum(1 for _, t in corpus if t.failing),
            "non_dag": sum(1 for _, t in corpus if t.non_dag),
        },
    )
    return corpus


def write_corpus(corpus: Sequence[tuple[Trace, GroundTruth]], out_dir: Path | str) -> Path:
    """One trace file per case plus a single ground-truth file."""
    out = Path(out_dir)
    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    for trace, _ in corpus:
        (traces_dir / f"{trace.trace_id}{TRACE_SUFFIX}").write_text(serialize_trace(trace) + "\n", encoding="utf-8")
    truths = [truth.model_dump(mode="json") for _, truth in corpus]
    path = out / GROUND_TRUTH_FILE
    path.write_text(json.dumps(truths, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Framework scoring
# ---------------------------------------------------------------------------

def oracle_context(concurrency: int = 1, classify: bool = False, **overrides) -> EvaluationContext:
    """Rule-judge context over the built-in packs."""
    return EvaluationContext(
        judge=RuleJudge(load_rules()),
        registry=builtin_registry(),
        taxonomy=_builtin_taxonomy(),
        concurrency=concurrency,
        classify=classify,
        **overrides,
    )


@dataclass(frozen=True)
class CorpusEvaluation:
    dags: dict[str, EvalDAG]
    deviations: dict[str, DeviationReport | None]
    reports: dict[EvalMode, list[EvaluationReport]]


def build_dag(trace: Trace, truth: GroundTruth | None = None, unroll_limit: int = 5, align: bool = True) -> tuple[EvalDAG, DeviationReport | None]:
    dag = normalize(infer_dag(trace), unroll_limit)
    if align and truth is not None:
        return apply_schema(dag, schema_for(truth.shape, truth.blocks))
    return dag, None


def evaluate_corpus(
    corpus: Sequence[tuple[Trace, GroundTruth]],
    ctx: EvaluationContext,
    modes: Iterable[EvalMode] = (EvalMode.DAG, EvalMode.FLAT, EvalMode.E2E),
    unroll_limit: int = 5,
    align: bool = True,
) -> CorpusEvaluation:
    modes = list(modes)
    dags: dict[str, EvalDAG] = {}
    deviations: dict[str, DeviationReport | None] = {}
    reports: dict[EvalMode, list[EvaluationReport]] = {m: [] for m in modes}
    contexts = {m: replace(ctx, mode=m) for m in modes}
    for trace, truth in corpus:
        dag, deviation = build_dag(trace, truth, unroll_limit, align)
        dags[trace.trace_id] = dag
        deviations[trace.trace_id] = deviation
        for mode in modes:
            reports[mode].append(evaluate_trace(dag, contexts[mode], deviation))
    return CorpusEvaluation(dags=dags, deviations=deviations, reports=reports)


class FrameworkRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: EvalMode
    fdrec: float | None
    fpr: float | None
    rca: float | None
    fdrec_ci: tuple[float, float] | None = None
    masked_fdrec: float | None = None
    hops: dict[str, int] = Field(default_factory=dict)
    traces: int
    failing: int
    clean: int


class FrameworkTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: list[FrameworkRow]

    def row(self, mode: EvalMode | str) -> FrameworkRow:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise HarnessError(f"no row for mode {mode!r}")

    def to_markdown(self) -> str:
        def fmt(value: float | None) -> str:
            return "n/a" if value is None else f"{value:.3f}"

        lines = [
            "| mode | FDRec | FDRec 95% CI | FPR | RCA | masked FDRec | traces | failing | clean |",
            "|---|---|---|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            ci = "n/a" if r.fdrec_ci is None else f"[{r.fdrec_ci[0]:.3f}, {r.fdrec_ci[1]:.3f}]"
            lines.append(
                f"| {r.mode.value} | {fmt(r.fdrec)} | {ci} | {fmt(r.fpr)} | {fmt(r.rca)} | "
                f"{fmt(r.masked_fdrec)} | {r.traces} | {r.failing} | {r.clean} |"
            )
        return "\n".join(lines) + "\n"


def detection_records(dag: EvalDAG, report: EvaluationReport, truth: GroundTruth) -> list[DetectionTruth]:
    """One record per DAG node; unjudged nodes count as not flagged."""
    if report.trace_id != truth.trace_id or dag.trace_id != truth.trace_id:
        raise HarnessError(f"report/truth mismatch: {report.trace_id!r} vs {truth.trace_id!r}")
    failing = set(truth.failing)
    records = []
    for node_id in dag.node_ids():
        result = report.result(node_id)
        flagged = bool(result is not None and result.flagged)
        records.append(
            DetectionTruth(
                trace_id=truth.trace_id,
                node_id=node_id,
                failing=node_id in failing,
                flagged=flagged,
                true_root=truth.true_root.get(node_id),
                attributed_root=report.root_of(node_id) if flagged else None,
            )
        )
    return records


def score_framework(
    reports: Mapping[EvalMode, Sequence[EvaluationReport]],
    truths: Sequence[GroundTruth],
    dags: Mapping[str, EvalDAG],
    resamples: int = 2000,
    seed: int = 0,
) -> FrameworkTable:
    """Per-mode FDRec/FPR/RCA with an FDRec bootstrap interval and RCA hop histogram."""
    by_id = {t.trace_id: t for t in truths}
    rows = []
    for mode, mode_reports in reports.items():
        if {r.trace_id for r in mode_reports} != set(by_id):
            raise HarnessError(f"{mode.value} reports are not aligned with ground truth by trace id")
        records: list[DetectionTruth] = []
        masked: list[DetectionTruth] = []
        hops: Counter[str] = Counter()
        for report in mode_reports:
            if report.trace_id not in dags:
                raise HarnessError(f"no DAG for trace {report.trace_id!r}")
            dag, truth = dags[report.trace_id], by_id[report.trace_id]
            trace_records = detection_records(dag, report, truth)
            records.extend(trace_records)
            if truth.masked:
                masked.extend(trace_records)
            for rec in trace_records:
                if rec.failing and rec.true_root is not None and rec.attributed_root is not None:
                    distance = rca_hop_distance(dag, rec.attributed_root, rec.true_root)
                    hops["disconnected" if distance is None else str(distance)] += 1

        metrics = detection_metrics(records)
        flags = [float(r.flagged) for r in records if r.failing]
        rows.append(
            FrameworkRow(
                mode=mode,
                fdrec=metrics.fdrec,
                fpr=metrics.fpr,
                rca=metrics.rca,
                fdrec_ci=bootstrap_ci(flags, resamples=resamples, seed=seed) if flags else None,
                masked_fdrec=detection_metrics(masked).fdrec if masked else None,
                hops=dict(sorted(hops.items())),
                traces=len(mode_reports),
                failing=metrics.failing,
                clean=metrics.clean,
            )
        )
    return FrameworkTable(rows=rows)


class SweepPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    rate: float
    fdrec: float | None
    rca: float | None
    fallback_share: float
    seeds: int


def sweep_nondag(
    spec: GenSpec,
    rates: Sequence[float],
    n: int,
    ctx: EvaluationContext,
    seeds: Sequence[int] | None = None,
) -> list[SweepPoint]:
    """DAG-mode FDRec/RCA as the share of non-DAG traces grows, averaged over seeds."""
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise HarnessError("non-DAG rates must lie in [0, 1]")
    seeds = list(seeds) if seeds is not None else [spec.seed]
    points = []
    for rate in rates:
        fdrecs, rcas, fallbacks = [], [], []
        for seed in seeds:
            corpus = generate(spec.model_copy(update={"non_dag_rate": rate, "seed": seed}), n)
            evaluation = evaluate_corpus(corpus, ctx, modes=(EvalMode.DAG,), align=False)
            table = score_framework(evaluation.reports, [t for _, t in corpus], evaluation.dags)
            row = table.row(EvalMode.DAG)
            if row.fdrec is not None:
                fdrecs.append(row.fdrec)
            if row.rca is not None:
                rcas.append(row.rca)
            fallbacks.append(
                sum(d.origin == DagOrigin.FLAT_FALLBACK for d in evaluation.dags.values()) / max(len(corpus), 1)
            )
        points.append(
            SweepPoint(
                rate=rate,
                fdrec=float(np.mean(fdrecs)) if fdrecs else None,
                rca=float(np.mean(rcas)) if rcas else None,
                fallback_share=float(np.mean(fallbacks)),
                seeds=len(seeds),
            )
        )
        logger.info(
            "Non-DAG sweep point",
            extra={"component": "sweep_nondag", "rate": rate, "fdrec": points[-1].fdrec, "rca": points[-1].rca},
        )
    return points


# ---------------------------------------------------------------------------
# Regression battery
# ---------------------------------------------------------------------------

class Archetype(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    degradation: dict[str, float] = Field(default_factory=dict)
    improvement: float = 0.0

    @property
    def expected_scope(self) -> str | None:
        return next(iter(self.degradation), None)


def default_archetypes(rate: float = 0.12) -> list[Archetype]:
    return [
        Archetype(name="benign_rephrase"),
        Archetype(name="param_degradation", degradation={StepType.PARAM_GEN: rate}),
        Archetype(name="tool_deprecation", degradation={StepType.TOOL_SEL: rate}),
        Archetype(name="synthesis_degradation", degradation={StepType.SYNTH: rate}),
        Archetype(name="provider_update", degradation={StepType.EXEC: rate}),
        Archetype(name="quality_improvement", improvement=0.5),
    ]


class BatteryOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    archetype: str
    shape: str
    seed: int
    expected_scope: str | None
    alerted: bool
    localized: list[str] = Field(default_factory=list)
    severity: str | None = None

    @property
    def correct(self) -> bool:
        if self.expected_scope is None:
            return not self.alerted
        return self.alerted and bool(self.localized) and self.localized[0] == self.expected_scope


class BatterySummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    outcomes: list[BatteryOutcome]

    @property
    def detection_rate(self) -> float | None:
        runs = [o for o in self.outcomes if o.expected_scope is not None]
        return sum(o.correct for o in runs) / len(runs) if runs else None

    @property
    def null_alert_rate(self) -> float | None:
        runs = [o for o in self.outcomes if o.expected_scope is None]
        return sum(o.alerted for o in runs) / len(runs) if runs else None


def regression_battery(
    ctx: EvaluationContext | None = None,
    shapes: Sequence[str] = SHAPES,
    seeds: Iterable[int] = range(10),
    cases: int = 100,
    history: int = 5,
    archetypes: Sequence[Archetype] | None = None,
    jitter: float = 0.02,
) -> BatterySummary:
    """Scenario archetypes x synthetic workflows x seeds through dual-threshold detection.

    History runs and every archetype's candidate run share the per-case
    random numbers; only run-level jitter and the archetype's injection differ.
    """
    from ageval import regression  # noqa: PLC0415

    ctx = ctx or oracle_context()
    archetypes = list(archetypes) if archetypes is not None else default_archetypes()
    timestamp = _EPOCH
    cache: dict[str, EvaluationReport] = {}
    outcomes = []

    for shape in shapes:
        for seed in seeds:
            base = GenSpec(name=f"bat-{shape}", shape=shape, min_blocks=2, max_blocks=2, seed=seed, jitter=jitter)
            suite_id = f"battery-{shape}-{seed}"
            policy = regression.AlertPolicy(seed=seed)

            def run(spec: GenSpec, run_seed: int, run_id: str) -> "regression.RunRecord":
                corpus = [generate_case(spec, i, run_seed=run_seed) for i in range(cases)]
                return regression.record_run(
                    suite_id,
                    [(trace.trace_id, trace, None, 0.5) for trace, _ in corpus],
                    ctx,
                    tier="full",
                    run_id=run_id,
                    timestamp=timestamp,
                    report_cache=cache,
                )

            past = [run(base, r, f"{suite_id}-h{r}") for r in range(history)]
            for archetype in archetypes:
                spec = base.model_copy(
                    update={"injected_degradation": dict(archetype.degradation), "improvement": archetype.improvement}
                )
                current = run(spec, history, f"{suite_id}-{archetype.name}")
                result = regression.detect_regression(current, past, policy)
                alert = result.alert
                outcomes.append(
                    BatteryOutcome(
                        archetype=archetype.name,
                        shape=shape,
                        seed=seed,
                        expected_scope=archetype.expected_scope,
                        alerted=alert is not None,
                        localized=list(alert.localized) if alert else [],
                        severity=alert.severity.value if alert else None,
                    )
                )
            cache.clear()

    summary = BatterySummary(outcomes=outcomes)
    logger.info(
        "Regression battery finished",
        extra={
            "component": "regression_battery",
            "runs": len(outcomes),
            "detection_rate": summary.detection_rate,
            "null_alert_rate": summary.null_alert_rate,
        },
    )
    return summary
