"""Tests for context aggregation, flagging, attribution and the workflow score"""
import pytest

from ageval.dag import infer_dag, normalize, topological_order
from ageval.engine import (
    aggregate_context,
    attribute_failures,
    combine_metric_scores,
    evaluate_trace,
    propagation_stats,
    workflow_score,
)
from ageval.errors import EvaluationError, JudgeUnavailableError
from ageval.judge import RuleJudge, RuleSet
from ageval.models import AttributionKind, AttributionStrategy, DagOrigin, EvalMode, JudgeVerdict


class RecordingJudge:
    """Delegates to a rule judge and keeps every request it sees."""

    def __init__(self, inner):
        self.inner = inner
        self.judge_id = inner.judge_id
        self.requests = []

    def score(self, request):
        self.requests.append(request)
        return self.inner.score(request)

    def classify(self, request):
        return self.inner.classify(request)


class BrokenJudge:
    judge_id = "broken"

    def score(self, request):
        raise JudgeUnavailableError("all 1 tiers failed for test")

    def classify(self, request):
        return "Category: none"


@pytest.fixture
def diamond(trace_factory):
    """a -> (b, c) -> d -> e"""
    return trace_factory(
        [
            ("a", "Plan", [], "plan"),
            ("b", "ToolSel", ["a"], "use weather_api"),
            ("c", "ToolSel", ["a"], "use search_api"),
            ("d", "ParamGen", ["b", "c"], "{}"),
            ("e", "Exec", ["d"], "404"),
        ],
        trace_id="diamond",
    )


DIAMOND_SCORES = {"a": 4.5, "b": 1.8, "c": 2.2, "d": 1.9, "e": 2.0}


def _attribution(report):
    return {r.node_id: (r.failure.attribution, r.failure.propagated_from) for r in report.flagged()}


# ============================================================================
# Workflow score
# ============================================================================

def test_workflow_score_weights_by_descendants(trace_factory):
    """Upstream nodes weigh more: a chain scoring 4, 2, 4 gives Q = 3.0"""
    dag = infer_dag(trace_factory([("x", "Plan", [], ""), ("y", "Exec", ["x"], ""), ("z", "Synth", ["y"], "")]))
    assert workflow_score(dag, {"x": 4, "y": 2, "z": 4}) == pytest.approx(3.0)


def test_workflow_score_skips_non_canonical_attempts(trace_factory):
    """Earlier retry attempts neither count as terms nor as descendants"""
    trace = trace_factory(
        [
            ("p", "Plan", [], "plan"),
            ("s1", "ToolSel", ["p"], "timeout", {"name": "select_tool", "attempt": 1}),
            ("s2", "ToolSel", ["p"], "ok", {"name": "select_tool", "attempt": 2}),
            ("g", "ParamGen", ["s2"], "{}"),
        ]
    )
    dag = normalize(infer_dag(trace))
    with_attempt = workflow_score(dag, {"p": 4, "s1": 1, "s2": 2, "g": 4})
    assert with_attempt == pytest.approx(3.0)
    assert with_attempt == workflow_score(dag, {"p": 4, "s2": 2, "g": 4})


def test_workflow_score_of_nothing_is_none(five_step_chain):
    """No judged canonical nodes means no score"""
    assert workflow_score(infer_dag(five_step_chain), {}) is None


# ============================================================================
# Context and combination
# ============================================================================

def test_context_lists_parent_outputs_without_scores(five_step_chain):
    """Context is the labeled parent outputs, nothing else"""
    dag = infer_dag(five_step_chain)
    assert aggregate_context(dag, "v3") == "[v2] (ToolSel): use weather_api"
    assert aggregate_context(dag, "v1") == ""


def test_context_follows_topological_position(diamond):
    """Several parents appear in topological order"""
    assert aggregate_context(infer_dag(diamond), "d").splitlines() == [
        "[b] (ToolSel): use weather_api",
        "[c] (ToolSel): use search_api",
    ]


def test_combine_rules():
    """min is the default; mean averages"""
    verdicts = [JudgeVerdict(metric_id=m, score=s, judge_id="j") for m, s in (("a", 2), ("b", 4), ("c", 3))]
    assert combine_metric_scores(verdicts) == 2
    assert combine_metric_scores(verdicts, "mean") == pytest.approx(3.0)
    with pytest.raises(EvaluationError):
        combine_metric_scores([])


def test_unknown_combine_rule_is_rejected(context_factory):
    """Only min and mean are combine rules"""
    with pytest.raises(EvaluationError, match="combine"):
        context_factory(combine="median")


def test_fingerprint_tracks_configuration(context_factory):
    """Changing the strategy changes the configuration digest"""
    greedy = context_factory().fingerprint()
    fullpath = context_factory(strategy=AttributionStrategy.FULL_PATH_MINIMUM).fingerprint()
    assert greedy.digest() == context_factory().fingerprint().digest()
    assert greedy.digest() != fullpath.digest()


# ============================================================================
# Flagging and attribution
# ============================================================================

def test_five_step_chain_has_one_root(five_step_chain, context_factory, chain_scores):
    """The wrong tool choice is the root; everything after it propagates"""
    report = evaluate_trace(infer_dag(five_step_chain), context_factory(scores=chain_scores))

    assert [r.node_id for r in report.flagged()] == ["v2", "v3", "v4", "v5"]
    assert _attribution(report) == {
        "v2": (AttributionKind.ROOT_CAUSE, None),
        "v3": (AttributionKind.PROPAGATED, "v2"),
        "v4": (AttributionKind.PROPAGATED, "v3"),
        "v5": (AttributionKind.PROPAGATED, "v4"),
    }
    assert report.root_of("v5") == "v2"
    assert [(c.root, c.nodes) for c in report.chains] == [("v2", ["v3", "v4", "v5"])]
    assert (report.stats.root_count, report.stats.propagated_count) == (1, 3)
    assert report.stats.mean_chain_length == pytest.approx(3.0)
    assert report.origin == DagOrigin.TRACE_INFERRED


def test_paramgen_threshold_is_lower(trace_factory, context_factory):
    """ParamGen scoring 2.7 passes while ToolSel scoring 2.7 is flagged"""
    trace = trace_factory([("s", "ToolSel", [], "x"), ("g", "ParamGen", ["s"], "{}")])
    report = evaluate_trace(infer_dag(trace), context_factory(scores={"s": 2.7, "g": 2.7}))
    assert report.result("g").threshold == 2.5
    assert not report.result("g").flagged
    assert report.result("s").flagged


def test_score_at_threshold_is_not_flagged(trace_factory, context_factory):
    """Flagging is strictly below the threshold"""
    trace = trace_factory([("e", "Exec", [], "x")])
    report = evaluate_trace(infer_dag(trace), context_factory(scores={"e": 3.0}))
    assert report.flagged() == []


def test_greedy_picks_lowest_flagged_parent(diamond, context_factory):
    """d propagates from b, the lower of its two flagged parents"""
    report = evaluate_trace(infer_dag(diamond), context_factory(scores=DIAMOND_SCORES))
    attribution = _attribution(report)
    assert attribution["b"] == (AttributionKind.ROOT_CAUSE, None)
    assert attribution["c"] == (AttributionKind.ROOT_CAUSE, None)
    assert attribution["d"] == (AttributionKind.PROPAGATED, "b")
    assert attribution["e"] == (AttributionKind.PROPAGATED, "d")
    assert [(c.root, c.nodes) for c in report.chains] == [("b", ["d", "e"]), ("c", [])]


def test_propagation_stats_average_over_roots(diamond, context_factory):
    """A root with no descendants still counts towards the mean chain length"""
    report = evaluate_trace(infer_dag(diamond), context_factory(scores=DIAMOND_SCORES))
    stats = propagation_stats(report)
    assert (stats.root_count, stats.propagated_count) == (2, 2)
    assert stats.mean_chain_length == pytest.approx(1.0)
    assert stats == report.stats


def test_full_path_minimum_skips_intermediate_nodes(diamond, context_factory):
    """Full-path attribution links e straight to the lowest flagged ancestor"""
    ctx = context_factory(scores=DIAMOND_SCORES, strategy=AttributionStrategy.FULL_PATH_MINIMUM)
    attribution = _attribution(evaluate_trace(infer_dag(diamond), ctx))
    assert attribution["e"] == (AttributionKind.PROPAGATED, "b")
    assert attribution["d"] == (AttributionKind.PROPAGATED, "b")


def test_weighted_propagation_uses_edge_weights(diamond, context_factory):
    """A heavy edge makes the other parent the more likely source"""
    ctx = context_factory(
        scores=DIAMOND_SCORES,
        strategy=AttributionStrategy.WEIGHTED_PROPAGATION,
        edge_weights={("b", "d"): 2.0},
    )
    attribution = _attribution(evaluate_trace(infer_dag(diamond), ctx))
    assert attribution["d"] == (AttributionKind.PROPAGATED, "c")


def test_equal_parents_resolve_to_earlier_position(diamond, context_factory):
    """Ties go to the parent that comes first topologically"""
    scores = {**DIAMOND_SCORES, "c": 1.8}
    attribution = _attribution(evaluate_trace(infer_dag(diamond), context_factory(scores=scores)))
    assert attribution["d"] == (AttributionKind.PROPAGATED, "b")


def test_attribution_survives_monotone_rescaling(diamond):
    """Only the ordering of qualities matters"""
    dag = infer_dag(diamond)
    order = topological_order(dag)
    flagged = {"b", "c", "d", "e"}
    for strategy in (AttributionStrategy.GREEDY_LOWEST_PARENT, AttributionStrategy.FULL_PATH_MINIMUM):
        plain = attribute_failures(dag, order, DIAMOND_SCORES, flagged, strategy)
        squared = attribute_failures(dag, order, {k: v**2 for k, v in DIAMOND_SCORES.items()}, flagged, strategy)
        assert plain == squared


def test_unflagged_parents_are_never_sources(trace_factory, context_factory):
    """A failure under a passing parent is its own root"""
    trace = trace_factory([("p", "Plan", [], ""), ("s", "ToolSel", ["p"], ""), ("g", "ParamGen", ["s"], "")])
    report = evaluate_trace(infer_dag(trace), context_factory(scores={"p": 4.0, "s": 3.2, "g": 1.0}))
    assert _attribution(report) == {"g": (AttributionKind.ROOT_CAUSE, None)}


# ============================================================================
# Modes
# ============================================================================

def test_flat_mode_judges_without_context(five_step_chain, context_factory, chain_scores):
    """Flat mode sends empty contexts and makes every failure a root"""
    recorder = RecordingJudge(context_factory(scores=chain_scores).judge)
    ctx = context_factory(mode=EvalMode.FLAT, judge=recorder)

    report = evaluate_trace(infer_dag(five_step_chain), ctx)

    assert all(not r.context for r in recorder.requests)
    assert all(r.failure.attribution == AttributionKind.ROOT_CAUSE for r in report.flagged())
    assert report.stats.root_count == 4
    assert report.mode == EvalMode.FLAT


def test_dag_mode_sends_parent_context(five_step_chain, context_factory):
    """DAG mode frames every non-Plan node with its parents' outputs"""
    recorder = RecordingJudge(RuleJudge(RuleSet()))
    evaluate_trace(infer_dag(five_step_chain), context_factory(judge=recorder))
    by_node = {r.node_id: r for r in recorder.requests}
    assert by_node["v4"].context == '[v3] (ParamGen): {"city": "8812"}'
    assert by_node["v1"].query == five_step_chain.query


def test_e2e_judges_only_the_terminal(five_step_chain, context_factory, chain_scores):
    """End-to-end mode scores the final answer with the Synth metrics"""
    recorder = RecordingJudge(RuleJudge(RuleSet(rules=[{"node": k, "score": v} for k, v in chain_scores.items()])))
    report = evaluate_trace(infer_dag(five_step_chain), context_factory(judge=recorder, mode=EvalMode.E2E))

    assert [r.node_id for r in report.node_results] == ["v5"]
    assert {r.metric.step_type for r in recorder.requests} == {"Synth"}
    assert report.flagged()[0].failure.attribution == AttributionKind.ROOT_CAUSE
    assert report.workflow_score == pytest.approx(2.3)


def test_judge_errors_propagate(five_step_chain, context_factory):
    """A judge that cannot answer fails the whole evaluation"""
    with pytest.raises(JudgeUnavailableError):
        evaluate_trace(infer_dag(five_step_chain), context_factory(judge=BrokenJudge()))
