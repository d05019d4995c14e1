"""Trace evaluation: context aggregation, per-node judging, flagging, attribution and the workflow score."""

from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from loguru import logger

from ageval.dag import ancestors, descendants, topological_order
from ageval.errors import EvaluationError
from ageval.judge import Judge, JudgeRequest, NodeView
from ageval.models import (
    AttributionKind,
    AttributionStrategy,
    ConfigFingerprint,
    DeviationReport,
    EvalDAG,
    EvalMode,
    EvalNode,
    EvaluationReport,
    FailureRecord,
    JudgeVerdict,
    NodeResult,
    PropagationChain,
    PropagationStats,
    StepType,
)
from ageval.rubrics import MetricRegistry, ThresholdConfig
from ageval.taxonomy import Taxonomy, classify_failure

COMBINE_RULES = ("min", "mean")


@dataclass(frozen=True)
class EvaluationContext:
    judge: Judge
    registry: MetricRegistry
    taxonomy: Taxonomy
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    strategy: AttributionStrategy = AttributionStrategy.GREEDY_LOWEST_PARENT
    mode: EvalMode = EvalMode.DAG
    combine: str = "min"
    concurrency: int = 4
    classify: bool = True
    edge_weights: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.combine not in COMBINE_RULES:
            raise EvaluationError(f"unknown combine rule {self.combine!r}, expected one of {COMBINE_RULES}")
        if self.concurrency < 1:
            raise EvaluationError("concurrency must be at least 1")

    def fingerprint(self) -> ConfigFingerprint:
        return ConfigFingerprint(
            judge_id=self.judge.judge_id,
            metric_pack_hash=self.registry.content_hash,
            thresholds={str(k): v for k, v in sorted(self.thresholds.thresholds.items())},
            strategy=self.strategy,
            combine=self.combine,
            mode=self.mode,
        )


def aggregate_context(dag: EvalDAG, node_id: str, order: list[str] | None = None) -> str:
    """Labeled outputs of the node's parents in topological position; never scores."""
    order = order if order is not None else topological_order(dag)
    position = {n: i for i, n in enumerate(order)}
    parents = sorted(set(dag.parents(node_id)), key=lambda p: position[p])
    lines = []
    for parent_id in parents:
        parent = dag.node(parent_id)
        lines.append(f"[{parent.name}] ({parent.step_type}): {parent.output}")
    return "\n".join(lines)


def combine_metric_scores(verdicts: list[JudgeVerdict], rule: str = "min") -> float:
    if not verdicts:
        raise EvaluationError("cannot combine an empty verdict list")
    scores = [v.score for v in verdicts]
    if rule == "mean":
        return sum(scores) / len(scores)
    return min(scores)


def workflow_score(dag: EvalDAG, qualities: Mapping[str, float]) -> float | None:
    """Weighted harmonic mean of node qualities, w = |desc| + 1.

    Non-canonical retry attempts are excluded, both as terms and as
    descendants.
    """
    canonical = {n.id for n in dag.nodes if n.canonical}
    terms = [(node_id, q) for node_id, q in qualities.items() if node_id in canonical]
    if not terms:
        return None
    total_weight = 0.0
    inverse = 0.0
    for node_id, quality in terms:
        weight = len(descendants(dag, node_id) & canonical) + 1
        total_weight += weight
        inverse += weight / quality
    return total_weight / inverse


def _levels(dag: EvalDAG, order: list[str]) -> list[list[str]]:
    depth: dict[str, int] = {}
    for node_id in order:
        depth[node_id] = max((depth[p] + 1 for p in dag.parents(node_id)), default=0)
    levels: list[list[str]] = [[] for _ in range(max(depth.values(), default=-1) + 1)]
    for node_id in order:
        levels[depth[node_id]].append(node_id)
    return levels


def build_requests(
    dag: EvalDAG,
    node: EvalNode,
    ctx: EvaluationContext,
    order: list[str],
    corrected_upstream: Mapping[str, str] | None = None,
) -> list[JudgeRequest]:
    """One request per metric of the node's type, framed for the context's mode."""
    if ctx.mode == EvalMode.E2E:
        metrics = ctx.registry.metrics_for(StepType.SYNTH)
        context = dag.query
    else:
        metrics = ctx.registry.metrics_for(node.step_type)
        context = "" if ctx.mode == EvalMode.FLAT else aggregate_context(dag, node.id, order)

    tools = node.metadata.get("available_tools")
    subtask = node.metadata.get("subtask") or node.input
    view = NodeView.from_node(node, subtask=str(subtask))
    return [
        JudgeRequest(
            node=view,
            node_id=node.id,
            context=context,
            metric=metric,
            tool_list=[str(t) for t in tools] if isinstance(tools, list) else None,
            query=dag.query,
            corrected_upstream=dict(corrected_upstream or {}),
        )
        for metric in metrics
    ]


def judge_nodes(
    dag: EvalDAG,
    node_ids: list[str],
    ctx: EvaluationContext,
    order: list[str],
    corrected_upstream: Mapping[str, str] | None = None,
) -> dict[str, list[JudgeVerdict]]:
    """Judge nodes level by level; nodes inside a level share no ancestry."""
    wanted = set(node_ids)
    results: dict[str, list[JudgeVerdict]] = {}
    with ThreadPoolExecutor(max_workers=ctx.concurrency) as executor:
        for level in _levels(dag, order):
            batch = [n for n in level if n in wanted]
            futures = {
                node_id: [
                    executor.submit(ctx.judge.score, request)
                    for request in build_requests(dag, dag.node(node_id), ctx, order, corrected_upstream)
                ]
                for node_id in batch
            }
            try:
                for node_id in batch:
                    results[node_id] = [f.result() for f in futures[node_id]]
            except Exception:
                executor.shutdown(wait=True, cancel_futures=True)
                raise
    return results


def attribute_failures(
    dag: EvalDAG,
    order: list[str],
    qualities: Mapping[str, float],
    flagged: set[str],
    strategy: AttributionStrategy,
    edge_weights: Mapping[tuple[str, str], float] | None = None,
) -> dict[str, tuple[AttributionKind, str | None]]:
    """Root-cause or propagated-from for every flagged node.

    Ties between equally low candidates go to the earlier topological position.
    """
    position = {n: i for i, n in enumerate(order)}
    weights = edge_weights or {}
    attribution: dict[str, tuple[AttributionKind, str | None]] = {}

    for node_id in order:
        if node_id not in flagged:
            continue
        if strategy == AttributionStrategy.FULL_PATH_MINIMUM:
            candidates = [a for a in ancestors(dag, node_id) if a in flagged]
            key = lambda a: (qualities[a], position[a])  # noqa: E731
        elif strategy == AttributionStrategy.WEIGHTED_PROPAGATION:
            candidates = [p for p in set(dag.parents(node_id)) if p in flagged]
            key = lambda p: (qualities[p] * weights.get((p, node_id), 1.0), position[p])  # noqa: E731
        else:
            candidates = [p for p in set(dag.parents(node_id)) if p in flagged]
            key = lambda p: (qualities[p], position[p])  # noqa: E731

        if candidates:
            attribution[node_id] = (AttributionKind.PROPAGATED, min(candidates, key=key))
        else:
            attribution[node_id] = (AttributionKind.ROOT_CAUSE, None)
    return attribution


def _root_of(node_id: str, attribution: Mapping[str, tuple[AttributionKind, str | None]]) -> str | None:
    seen: set[str] = set()
    current: str | None = node_id
    while current is not None and current in attribution and current not in seen:
        seen.add(current)
        kind, source = attribution[current]
        if kind == AttributionKind.ROOT_CAUSE:
            return current
        current = source
    return None


def build_chains(order: list[str], attribution: Mapping[str, tuple[AttributionKind, str | None]]) -> list[PropagationChain]:
    chains = []
    for root in order:
        if attribution.get(root, (None, None))[0] != AttributionKind.ROOT_CAUSE:
            continue
        members = [
            n for n in order
            if n != root and n in attribution and _root_of(n, attribution) == root
        ]
        chains.append(PropagationChain(root=root, nodes=members))
    return chains


def propagation_stats(report: EvaluationReport) -> PropagationStats:
    """Root/propagated counts and the mean number of propagated nodes per root."""
    flagged = [r for r in report.node_results if r.failure is not None]
    roots = sum(1 for r in flagged if r.failure.attribution == AttributionKind.ROOT_CAUSE)
    propagated = len(flagged) - roots
    lengths = [c.length for c in report.chains]
    return PropagationStats(
        root_count=roots,
        propagated_count=propagated,
        mean_chain_length=sum(lengths) / len(lengths) if lengths else None,
    )


def evaluate_trace(dag: EvalDAG, ctx: EvaluationContext, deviation: DeviationReport | None = None) -> EvaluationReport:
    """Score every node, flag q < threshold, attribute failures and compute Q.

    In flat mode nodes are judged without upstream context and every failure
    is its own root; in e2e mode only canonical terminal nodes are judged,
    against the query with the Synth metric set.
    """
    order = topological_order(dag)
    if ctx.mode == EvalMode.E2E:
        terminals = set(dag.terminals())
        judged = [n for n in order if n in terminals and dag.node(n).canonical]
    else:
        judged = list(order)

    verdicts = judge_nodes(dag, judged, ctx, order)

    qualities: dict[str, float] = {}
    thresholds: dict[str, float] = {}
    for node_id in judged:
        node = dag.node(node_id)
        qualities[node_id] = combine_metric_scores(verdicts[node_id], ctx.combine)
        if ctx.mode == EvalMode.E2E:
            thresholds[node_id] = ctx.thresholds.for_type(StepType.SYNTH)
        else:
            thresholds[node_id] = ctx.thresholds.threshold_for(node)
    flagged = {n for n in judged if qualities[n] < thresholds[n]}

    if ctx.mode == EvalMode.DAG:
        attribution = attribute_failures(dag, order, qualities, flagged, ctx.strategy, ctx.edge_weights)
    else:
        attribution = {n: (AttributionKind.ROOT_CAUSE, None) for n in judged if n in flagged}

    labels = {}
    if ctx.classify and flagged:
        flagged_ordered = [n for n in judged if n in flagged]
        with ThreadPoolExecutor(max_workers=ctx.concurrency) as executor:
            computed = executor.map(
                lambda n: classify_failure(
                    dag.node(n),
                    verdicts[n],
                    ctx.taxonomy,
                    ctx.judge,
                    context=aggregate_context(dag, n, order) if ctx.mode == EvalMode.DAG else "",
                    query=dag.query,
                ),
                flagged_ordered,
            )
            labels = dict(zip(flagged_ordered, computed))

    results = []
    for node_id in judged:
        node = dag.node(node_id)
        failure = None
        if node_id in flagged:
            kind, source = attribution[node_id]
            failure = FailureRecord(
                label=labels.get(node_id),
                attribution=kind,
                propagated_from=source,
                strategy_used=ctx.strategy,
            )
        results.append(
            NodeResult(
                node_id=node_id,
                step_type=node.step_type,
                name=node.name,
                verdicts=verdicts[node_id],
                quality=qualities[node_id],
                threshold=thresholds[node_id],
                flagged=node_id in flagged,
                canonical=node.canonical,
                failure=failure,
            )
        )

    chains = build_chains(order, attribution)
    report = EvaluationReport(
        trace_id=dag.trace_id,
        workflow_id=dag.workflow_id,
        mode=ctx.mode,
        origin=dag.origin,
        fallback_reason=dag.fallback_reason,
        node_results=results,
        workflow_score=workflow_score(dag, qualities),
        deviation=deviation,
        chains=chains,
        fingerprint=ctx.fingerprint(),
    )
    report = report.model_copy(update={"stats": propagation_stats(report)})

    logger.info(
        "Trace evaluated",
        extra={
            "component": "evaluate_trace",
            "trace_id": dag.trace_id,
            "mode": ctx.mode.value,
            "judged": len(judged),
            "flagged": len(flagged),
            "roots": report.stats.root_count,
            "workflow_score": report.workflow_score,
        },
    )
    return report
