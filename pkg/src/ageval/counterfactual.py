"""Counterfactual validation of attributed root causes.

The root's output is replaced by a gold reference and only its descendants
are re-judged; everything else in the DAG is left untouched.
"""

from collections.abc import Mapping
from enum import StrEnum
from pathlib import Path

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict

from ageval.dag import descendants, topological_order
from ageval.engine import EvaluationContext, combine_metric_scores, judge_nodes
from ageval.errors import CounterfactualError
from ageval.models import AttributionKind, EvalDAG, EvaluationReport

DEFAULT_DELTA = 1.0


class CounterfactualVerdict(StrEnum):
    CONFIRMED = "Confirmed"
    MANUAL_REVIEW = "ManualReview"


class ScoreDelta(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_id: str
    before: float
    after: float

    @property
    def improvement(self) -> float:
        return self.after - self.before


class CounterfactualResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    root_id: str
    deltas: list[ScoreDelta]
    mean_improvement: float
    verdict: CounterfactualVerdict
    delta: float = DEFAULT_DELTA


def load_gold(path: Path | str) -> dict[str, str]:
    """Read a node id -> replacement text map (JSON or YAML)."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise CounterfactualError(f"cannot read gold outputs {path}: {e}") from e
    if not isinstance(data, dict):
        raise CounterfactualError(f"{path}: expected a mapping of node id to text")
    return {str(k): str(v) for k, v in data.items()}


def _roots(report: EvaluationReport) -> list[str]:
    return [
        r.node_id for r in report.node_results
        if r.failure is not None and r.failure.attribution == AttributionKind.ROOT_CAUSE
    ]


def counterfactual_check(
    dag: EvalDAG,
    report: EvaluationReport,
    gold: Mapping[str, str],
    ctx: EvaluationContext,
    root: str | None = None,
    delta: float = DEFAULT_DELTA,
) -> CounterfactualResult:
    roots = _roots(report)
    if not roots:
        raise CounterfactualError(f"trace {report.trace_id!r} has no root-cause node")
    root = root if root is not None else roots[0]
    if root not in roots:
        raise CounterfactualError(f"node {root!r} is not a root cause in trace {report.trace_id!r}")
    if root not in gold:
        raise CounterfactualError(f"no gold output for root {root!r}")

    patched = dag.model_copy(
        update={"nodes": [n.model_copy(update={"output": gold[root]}) if n.id == root else n for n in dag.nodes]}
    )
    order = topological_order(patched)
    downstream = descendants(patched, root)
    judged = [n for n in order if n in downstream and report.result(n) is not None]

    verdicts = judge_nodes(patched, judged, ctx, order, corrected_upstream={root: gold[root]})
    deltas = [
        ScoreDelta(
            node_id=node_id,
            before=report.result(node_id).quality,
            after=combine_metric_scores(verdicts[node_id], ctx.combine),
        )
        for node_id in judged
    ]
    mean_improvement = sum(d.improvement for d in deltas) / len(deltas) if deltas else 0.0
    verdict = (
        CounterfactualVerdict.CONFIRMED
        if deltas and mean_improvement >= delta
        else CounterfactualVerdict.MANUAL_REVIEW
    )

    logger.info(
        "Counterfactual check finished",
        extra={
            "component": "counterfactual_check",
            "trace_id": report.trace_id,
            "root": root,
            "rejudged": len(deltas),
            "mean_improvement": round(mean_improvement, 4),
            "verdict": verdict.value,
        },
    )
    return CounterfactualResult(
        root_id=root,
        deltas=deltas,
        mean_improvement=mean_improvement,
        verdict=verdict,
        delta=delta,
    )


def counterfactual_all(
    dag: EvalDAG,
    report: EvaluationReport,
    gold: Mapping[str, str],
    ctx: EvaluationContext,
    delta: float = DEFAULT_DELTA,
) -> list[CounterfactualResult]:
    """Check each root independently; roots without a gold output are skipped."""
    results = []
    for root in _roots(report):
        if root not in gold:
            logger.warning(
                "Skipping root without gold output",
                extra={"component": "counterfactual_all", "trace_id": report.trace_id, "root": root},
            )
            continue
        results.append(counterfactual_check(dag, report, gold, ctx, root=root, delta=delta))
    return results
