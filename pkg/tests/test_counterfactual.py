"""Tests for counterfactual validation of root causes"""
import json

import pytest

from ageval.counterfactual import CounterfactualVerdict, counterfactual_all, counterfactual_check, load_gold
from ageval.dag import infer_dag
from ageval.engine import evaluate_trace
from ageval.errors import CounterfactualError

GOLD = {"v2": "GOLD use order_lookup_api"}

# Downstream steps recover once they see the corrected tool choice.
RECOVERY_RULES = [
    {"node": "v3", "field": "corrected", "pattern": "GOLD", "score": 4.6},
    {"node": "v4", "field": "corrected", "pattern": "GOLD", "score": 4.3},
    {"node": "v5", "field": "corrected", "pattern": "GOLD", "score": 4.1},
]


@pytest.fixture
def evaluated(five_step_chain, context_factory, chain_scores):
    def run(rules=None):
        ctx = context_factory(rules=rules or [], scores=chain_scores)
        dag = infer_dag(five_step_chain)
        return dag, evaluate_trace(dag, ctx), ctx

    return run


def test_recovering_descendants_confirm_the_root(evaluated):
    """Mean improvement 2.27 >= 1.0 confirms the attributed root"""
    dag, report, ctx = evaluated(RECOVERY_RULES)
    result = counterfactual_check(dag, report, GOLD, ctx)

    assert result.root_id == "v2"
    assert [d.node_id for d in result.deltas] == ["v3", "v4", "v5"]
    assert [(d.before, d.after) for d in result.deltas] == [(2.1, 4.6), (1.8, 4.3), (2.3, 4.1)]
    assert result.mean_improvement == pytest.approx(6.8 / 3)
    assert result.verdict == CounterfactualVerdict.CONFIRMED


def test_unchanged_descendants_need_manual_review(evaluated):
    """Without recovery downstream the root is sent to manual review"""
    dag, report, ctx = evaluated()
    result = counterfactual_check(dag, report, GOLD, ctx)
    assert result.mean_improvement == pytest.approx(0.0)
    assert result.verdict == CounterfactualVerdict.MANUAL_REVIEW


def test_delta_is_configurable(evaluated):
    """A stricter delta turns the same improvement into manual review"""
    dag, report, ctx = evaluated(RECOVERY_RULES)
    assert counterfactual_check(dag, report, GOLD, ctx, delta=2.5).verdict == CounterfactualVerdict.MANUAL_REVIEW


def test_only_descendants_are_rejudged(evaluated):
    """The root and its ancestors keep their original results"""
    dag, report, ctx = evaluated(RECOVERY_RULES)
    result = counterfactual_check(dag, report, GOLD, ctx)
    assert {"v1", "v2"}.isdisjoint(d.node_id for d in result.deltas)


def test_missing_gold_is_an_error(evaluated):
    """A root without a gold output cannot be checked"""
    dag, report, ctx = evaluated()
    with pytest.raises(CounterfactualError, match="gold"):
        counterfactual_check(dag, report, {}, ctx)


def test_non_root_is_rejected(evaluated):
    """Only RootCause nodes can be checked"""
    dag, report, ctx = evaluated()
    with pytest.raises(CounterfactualError, match="not a root cause"):
        counterfactual_check(dag, report, {"v3": "GOLD"}, ctx, root="v3")


def test_clean_trace_has_nothing_to_check(five_step_chain, context_factory):
    """A report without failures has no root to validate"""
    ctx = context_factory(scores={f"v{k}": 4.0 for k in range(1, 6)})
    dag = infer_dag(five_step_chain)
    with pytest.raises(CounterfactualError, match="no root-cause"):
        counterfactual_check(dag, evaluate_trace(dag, ctx), GOLD, ctx)


def test_check_all_skips_roots_without_gold(trace_factory, context_factory):
    """Every root with a gold output is checked independently"""
    trace = trace_factory(
        [
            ("a", "Plan", [], "plan"),
            ("b", "ToolSel", ["a"], "use weather_api"),
            ("c", "ToolSel", ["a"], "use search_api"),
        ]
    )
    ctx = context_factory(scores={"a": 4.5, "b": 1.5, "c": 2.0})
    dag = infer_dag(trace)
    results = counterfactual_all(dag, evaluate_trace(dag, ctx), {"b": "GOLD"}, ctx)
    assert [r.root_id for r in results] == ["b"]
    assert results[0].deltas == []
    assert results[0].verdict == CounterfactualVerdict.MANUAL_REVIEW


def test_load_gold_accepts_json_and_yaml(tmp_path):
    """Gold files are mappings of node id to text"""
    as_json = tmp_path / "gold.json"
    as_json.write_text(json.dumps(GOLD), encoding="utf-8")
    as_yaml = tmp_path / "gold.yaml"
    as_yaml.write_text("v2: GOLD use order_lookup_api\n", encoding="utf-8")
    assert load_gold(as_json) == GOLD
    assert load_gold(as_yaml) == GOLD


def test_load_gold_rejects_lists(tmp_path):
    """A list is not a gold mapping"""
    path = tmp_path / "gold.yaml"
    path.write_text("- v2\n", encoding="utf-8")
    with pytest.raises(CounterfactualError):
        load_gold(path)
