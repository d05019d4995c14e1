"""Shared fixtures: rule-judged contexts and small hand-built traces."""
from datetime import datetime, timedelta, timezone

import pytest

from ageval.engine import EvaluationContext
from ageval.judge import RuleJudge, RuleSet, load_rules
from ageval.models import StepRecord, Trace
from ageval.rubrics import builtin_registry
from ageval.taxonomy import load_taxonomy

T0 = datetime(2025, 3, 1, 9, 0, tzinfo=timezone.utc)


@pytest.fixture(scope="session")
def registry():
    return builtin_registry()


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy()


@pytest.fixture
def trace_factory():
    """Build a Trace from (step_id, step_type, parents, output[, extras]) tuples.

    Steps start two seconds apart in list order unless extras give ``start``
    (seconds after T0). Other extras are passed to StepRecord.
    """

    def make(steps, trace_id="t1", query="Refund order 8812 and email the customer"):
        records = []
        for k, step in enumerate(steps):
            step_id, step_type, parents, output = step[:4]
            extras = dict(step[4]) if len(step) > 4 else {}
            start = T0 + timedelta(seconds=extras.pop("start", 2 * k))
            records.append(
                StepRecord(
                    step_id=step_id,
                    parent_ids=list(parents),
                    step_type=step_type,
                    name=extras.pop("name", step_id),
                    started_at=start,
                    ended_at=start + timedelta(seconds=1),
                    output=output,
                    **extras,
                )
            )
        return Trace(
            trace_id=trace_id,
            workflow_id="wf",
            agent_model="test-agent",
            query=query,
            created_at=T0,
            steps=records,
        )

    return make


@pytest.fixture
def context_factory(registry, taxonomy):
    """Rule-judged EvaluationContext; ``scores`` pins node ids to fixed scores."""

    def make(rules=None, scores=None, default_score=3.0, **overrides):
        if rules is None and scores is None:
            rule_set = load_rules()
        else:
            pinned = [{"node": node_id, "score": score} for node_id, score in (scores or {}).items()]
            rule_set = RuleSet(rules=[*(rules or []), *pinned], default_score=default_score)
        overrides.setdefault("classify", False)
        overrides.setdefault("concurrency", 2)
        overrides.setdefault("judge", RuleJudge(rule_set))
        return EvaluationContext(registry=registry, taxonomy=taxonomy, **overrides)

    return make


@pytest.fixture
def five_step_chain(trace_factory):
    """Plan -> ToolSel -> ParamGen -> Exec -> Synth, ids v1..v5."""
    return trace_factory(
        [
            ("v1", "Plan", [], "1. look up order 2. refund 3. email"),
            ("v2", "ToolSel", ["v1"], "use weather_api"),
            ("v3", "ParamGen", ["v2"], '{"city": "8812"}'),
            ("v4", "Exec", ["v3"], "404 unknown city"),
            ("v5", "Synth", ["v4"], "Sorry, I could not find your order."),
        ],
        trace_id="chain-5",
    )


@pytest.fixture
def chain_scores():
    return {"v1": 4.5, "v2": 1.2, "v3": 2.1, "v4": 1.8, "v5": 2.3}
