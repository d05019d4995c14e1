"""Tests for prompt assembly, verdict parsing, the remote judge and the rule judge"""
import httpx
import pytest
from pydantic import ValidationError

from ageval.errors import JudgeError, JudgeUnavailableError, ScoreOutOfRangeError, UnparseableVerdictError
from ageval.judge import (
    ClassificationRequest,
    JudgeRequest,
    JudgeTier,
    JudgeTierConfig,
    NodeView,
    RemoteJudge,
    Rule,
    RuleJudge,
    RuleSet,
    VerdictCache,
    build_prompt,
    llm_judge,
    load_judge_tiers,
    load_rules,
    parse_category,
    parse_verdict,
    rule_judge,
)
from ageval.settings import AgevalSettings


@pytest.fixture
def request_for(registry):
    def make(metric_id="exec.success_rate", output="200 OK", context="", **fields):
        metric = registry.metric(metric_id)
        view = NodeView(
            step_type=metric.step_type,
            name=fields.pop("name", "call_api"),
            output=output,
            reference=fields.pop("reference", None),
            subtask=fields.pop("subtask", ""),
            metadata=fields.pop("metadata", {}),
        )
        if metric.step_type == "Plan":
            fields.setdefault("query", "Refund order 8812")
            return JudgeRequest(node=view, metric=metric, **fields)
        return JudgeRequest(node=view, metric=metric, context=context, **fields)

    return make


@pytest.fixture
def tiers():
    return JudgeTierConfig(
        tiers=[
            JudgeTier(name="primary", endpoint="https://judge.test/primary", model="big", max_attempts=2),
            JudgeTier(name="backup", endpoint="https://judge.test/backup", model="small", max_attempts=1),
        ]
    )


def _completion(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


class Recorder:
    """MockTransport handler replaying canned responses per endpoint."""

    def __init__(self, responses):
        self.responses = {k: list(v) for k, v in responses.items()}
        self.calls = []

    def __call__(self, request):
        self.calls.append(request)
        status, body = self.responses[request.url.path].pop(0)
        if isinstance(body, str):
            return httpx.Response(status, json=_completion(body))
        return httpx.Response(status, json=body)


# ============================================================================
# Prompts
# ============================================================================

def test_prompt_is_deterministic(request_for):
    """Identical requests render byte-identical prompts"""
    req = request_for(context="[select_tool] (ToolSel): use search_api")
    assert build_prompt(req) == build_prompt(req)
    assert build_prompt(req).digest("m") == build_prompt(req).digest("m")
    assert build_prompt(req).digest("m") != build_prompt(req).digest("other")


def test_prompt_carries_rubric_and_anchors(request_for, registry):
    """System prompt lists the rubric; user prompt lists every anchor"""
    metric = registry.metric("exec.success_rate")
    bundle = build_prompt(request_for())
    for level in metric.rubric:
        assert level in bundle.system
    for anchor in metric.anchors:
        assert anchor.example_output in bundle.user
    assert "Score:" in bundle.system


def test_plan_prompt_is_framed_by_query(request_for):
    """Plan steps are judged against the user query, not upstream context"""
    user = build_prompt(request_for("plan.completeness", output="1. refund")).user
    assert "User query: Refund order 8812" in user
    assert "Context: (none)" not in user


def test_empty_context_is_marked(request_for):
    """Nodes without upstream context say so explicitly"""
    assert "Context: (none)" in build_prompt(request_for()).user


def test_tool_list_and_reference_are_rendered(request_for):
    """ToolSel prompts list the available tools; references are included"""
    user = build_prompt(
        request_for(
            "toolsel.selection_accuracy",
            output="weather_api",
            tool_list=["search_api", "weather_api"],
            reference="search_api",
        )
    ).user
    assert "Available tools (2):" in user
    assert "- weather_api" in user
    assert "Reference output: search_api" in user


def test_corrected_upstream_block(request_for):
    """Counterfactual requests show the corrected ancestor outputs"""
    user = build_prompt(request_for(corrected_upstream={"n02": "use search_api"})).user
    assert "Corrected upstream outputs:" in user
    assert "[n02] use search_api" in user


def test_framing_is_enforced(registry):
    """Plan requests need a query; other types need a context"""
    plan = registry.metric("plan.completeness")
    exec_metric = registry.metric("exec.success_rate")
    view = NodeView(step_type="Plan", name="plan", output="1. refund")
    with pytest.raises(ValidationError, match="query"):
        JudgeRequest(node=view, metric=plan)
    with pytest.raises(ValidationError, match="context"):
        JudgeRequest(node=view.model_copy(update={"step_type": "Exec"}), metric=exec_metric)


# ============================================================================
# Parsing
# ============================================================================

def test_last_score_line_wins():
    """Only the last Score line counts"""
    assert parse_verdict("Score: 2\nOn reflection it is better.\nScore: 4") == 4


def test_markdown_score_line():
    """Bold markers around the score line are tolerated"""
    assert parse_verdict("The call failed.\n**Score:** 1") == 1
    assert parse_verdict("score: 3  ") == 3


def test_unparseable_verdict():
    """Text without a score line is unparseable"""
    with pytest.raises(UnparseableVerdictError):
        parse_verdict("I would rate this a four")


def test_score_out_of_range():
    """Scores outside 1..5 are rejected with the value"""
    with pytest.raises(ScoreOutOfRangeError) as excinfo:
        parse_verdict("Score: 7")
    assert excinfo.value.score == 7


def test_parse_category():
    """The last Category line names the leaf"""
    assert parse_category("Reasoning...\nCategory: timeout") == "timeout"
    assert parse_category("no idea") is None


# ============================================================================
# Remote judge
# ============================================================================

def test_remote_judge_scores_and_sends_credentials(request_for, tiers):
    """A good completion becomes a verdict; the key is sent as a bearer token"""
    recorder = Recorder({"/primary": [(200, "The call succeeded.\nScore: 5")]})
    settings = AgevalSettings(judge_api_key="sk-test")
    with RemoteJudge(tiers, settings=settings, cache=VerdictCache(), transport=httpx.MockTransport(recorder)) as judge:
        verdict = judge.score(request_for())
    assert verdict.score == 5
    assert verdict.judge_id == "primary"
    assert verdict.rationale == "The call succeeded."
    assert recorder.calls[0].headers["Authorization"] == "Bearer sk-test"
    assert judge.judge_id == "primary>backup"


def test_remote_judge_falls_back_after_http_errors(request_for, tiers):
    """A tier failing every attempt hands over to the next tier"""
    recorder = Recorder(
        {
            "/primary": [(503, {"error": "overloaded"}), (503, {"error": "overloaded"})],
            "/backup": [(200, "Score: 3")],
        }
    )
    judge = RemoteJudge(tiers, settings=AgevalSettings(), cache=VerdictCache(), transport=httpx.MockTransport(recorder))
    verdict = judge.score(request_for())
    assert verdict.judge_id == "backup"
    assert [c.url.path for c in recorder.calls] == ["/primary", "/primary", "/backup"]


def test_llm_judge_function_form(request_for, tiers, monkeypatch):
    """The one-shot form opens and closes its own client"""
    monkeypatch.delenv("AGEVAL_CACHE_DIR", raising=False)
    recorder = Recorder({"/primary": [(200, "Score: 4")]})
    assert llm_judge(request_for(), tiers, transport=httpx.MockTransport(recorder)).score == 4


def test_remote_judge_reasks_once(request_for, tiers):
    """An unparseable answer is re-asked once on the same tier"""
    recorder = Recorder({"/primary": [(200, "Looks fine to me."), (200, "Score: 4")]})
    judge = RemoteJudge(tiers, settings=AgevalSettings(), cache=VerdictCache(), transport=httpx.MockTransport(recorder))
    assert judge.score(request_for()).score == 4
    assert len(recorder.calls) == 2


def test_remote_judge_exhausts_tiers(request_for, tiers):
    """When every tier fails the judge is unavailable"""
    recorder = Recorder(
        {
            "/primary": [(200, "no verdict"), (200, "still none")],
            "/backup": [(500, {"error": "down"})],
        }
    )
    judge = RemoteJudge(tiers, settings=AgevalSettings(), cache=VerdictCache(), transport=httpx.MockTransport(recorder))
    with pytest.raises(JudgeUnavailableError, match="all 2 tiers failed"):
        judge.score(request_for())


def test_remote_judge_reuses_cached_verdicts(request_for, tiers, tmp_path):
    """A repeated request is answered from the cache without another call"""
    recorder = Recorder({"/primary": [(200, "Score: 2")]})
    cache = VerdictCache(tmp_path / "cache")
    judge = RemoteJudge(tiers, settings=AgevalSettings(), cache=cache, transport=httpx.MockTransport(recorder))
    first = judge.score(request_for())
    second = judge.score(request_for())
    assert not first.cached
    assert second.cached
    assert second.score == first.score
    assert len(recorder.calls) == 1

    fresh = VerdictCache(tmp_path / "cache")
    key = build_prompt(request_for()).digest("big")
    assert fresh.get(key).score == 2


def test_remote_classification_returns_raw_text(tiers, registry, taxonomy):
    """Classification answers are passed through unparsed"""
    recorder = Recorder({"/primary": [(200, "Category: timeout")]})
    judge = RemoteJudge(tiers, settings=AgevalSettings(), cache=VerdictCache(), transport=httpx.MockTransport(recorder))
    request = ClassificationRequest(
        node=NodeView(step_type="Exec", name="call_api", output="504"),
        choices=taxonomy.choices(),
    )
    assert judge.classify(request) == "Category: timeout"


def test_builtin_tiers_load():
    """The shipped tier file names three tiers"""
    config = load_judge_tiers()
    assert [t.name for t in config.tiers] == ["gpt-4o", "gpt-4o-mini", "llama3-70b-local"]
    assert config.temperature == 0.0


def test_invalid_tier_file(tmp_path):
    """A tier file without tiers is rejected"""
    path = tmp_path / "tiers.yaml"
    path.write_text("tiers: []\n", encoding="utf-8")
    with pytest.raises(JudgeError):
        load_judge_tiers(path)


# ============================================================================
# Rule judge
# ============================================================================

def test_first_matching_rule_wins(request_for):
    """Rules are tried in order; the default applies when none match"""
    judge = RuleJudge(
        RuleSet(
            rules=[
                Rule(pattern="404", score=1),
                Rule(pattern="4", score=2),
            ],
            default_score=4,
        )
    )
    assert judge.score(request_for(output="404 not found")).score == 1
    assert judge.score(request_for(output="got 4 rows")).score == 2
    assert judge.score(request_for(output="200 OK")).score == 4


def test_rule_filters(request_for):
    """metric, step type and node globs restrict a rule"""
    rules = RuleSet(
        rules=[
            Rule(metric_id="exec.result_*", score=2),
            Rule(step_type="Synth", score=1),
            Rule(node="n0?", score=5),
        ]
    )
    judge = RuleJudge(rules)
    assert judge.score(request_for("exec.result_validity")).score == 2
    assert judge.score(request_for("exec.success_rate")).score == 3
    assert judge.score(request_for("synth.coherence")).score == 1
    assert judge.score(request_for(node_id="n07")).score == 5


def test_builtin_rules_score_markers(request_for):
    """Injected, propagated and clean synthetic steps score 1, 2 and 5"""
    judge = RuleJudge(load_rules())
    clean = {"synthetic": True}
    assert judge.score(request_for(output="FAIL::timeout 504", metadata=clean)).score == 1
    assert judge.score(request_for(output="CORRUPT::n02 bad", metadata=clean)).score == 2
    assert judge.score(request_for(output="200 OK", metadata=clean)).score == 5
    assert judge.score(request_for(output="200 OK")).score == 3


def test_corrected_source_lifts_corruption(request_for):
    """A corrupted step is clean once its source is corrected upstream"""
    judge = RuleJudge(load_rules())
    req = request_for(output="CORRUPT::n02 bad", metadata={"synthetic": True}, corrected_upstream={"n02": "fixed"})
    assert judge.score(req).score == 5


def test_any_uncorrected_source_keeps_corruption(request_for):
    """With two corruption sources, correcting one is not enough"""
    judge = RuleJudge(load_rules())
    text = "CORRUPT::n02 CORRUPT::n05 merged"
    one = request_for(output=text, metadata={"synthetic": True}, corrected_upstream={"n02": "fixed"})
    both = request_for(output=text, metadata={"synthetic": True}, corrected_upstream={"n02": "a", "n05": "b"})
    assert judge.score(one).score == 2
    assert judge.score(both).score == 5


def test_corrected_field_rule(request_for):
    """Rules can key on the corrected upstream outputs"""
    judge = RuleJudge(RuleSet(rules=[Rule(field="corrected", pattern="GOLD", score=4.6)], default_score=2.1))
    assert judge.score(request_for()).score == 2.1
    assert judge.score(request_for(corrected_upstream={"v2": "GOLD selection"})).score == 4.6


def test_rule_judge_classifies_fail_markers(taxonomy):
    """The rule judge reads the leaf from the failure marker"""
    judge = RuleJudge(load_rules())
    request = ClassificationRequest(
        node=NodeView(step_type="Exec", name="call_api", output="FAIL::timeout 504"),
        choices=taxonomy.choices(),
    )
    assert judge.classify(request) == "Category: timeout"


def test_rule_judge_function_form(request_for):
    """rule_judge scores like a RuleJudge over the same rules"""
    rules = RuleSet(rules=[Rule(pattern="404", score=1)], default_score=4)
    assert rule_judge(request_for(output="404"), rules).score == 1
    assert rule_judge(request_for(), rules) == RuleJudge(rules).score(request_for())


def test_rule_judge_id_tracks_rules():
    """Different rule sets give different judge ids"""
    a = RuleJudge(RuleSet(rules=[Rule(pattern="x", score=1)]))
    b = RuleJudge(RuleSet(rules=[Rule(pattern="y", score=1)]))
    assert a.judge_id != b.judge_id
    assert a.judge_id.startswith("rule:")


def test_invalid_rule_file(tmp_path):
    """Rule files with out-of-range scores are rejected"""
    path = tmp_path / "rules.yaml"
    path.write_text("- pattern: x\n  score: 9\n", encoding="utf-8")
    with pytest.raises(JudgeError):
        load_rules(path)
