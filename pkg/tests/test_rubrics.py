"""Tests for the metric registry, rubrics and thresholds"""
import pytest
import yaml
from pydantic import ValidationError

from ageval.dag import infer_dag
from ageval.errors import MetricPackError, UnregisteredStepTypeError
from ageval.rubrics import MetricRegistry, MetricSpec, ThresholdConfig, load_metric_pack, load_thresholds


def _pack(tmp_path, metrics, name="pack.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump({"metrics": [m.model_dump(mode="json") for m in metrics]}), encoding="utf-8")
    return path


# ============================================================================
# Built-in pack
# ============================================================================

def test_builtin_pack_has_eleven_metrics(registry):
    """Five step types with 2/2/2/2/3 metrics"""
    assert len(registry) == 11
    assert {t: len(registry.metrics_for(t)) for t in registry.step_types} == {
        "Plan": 2,
        "ToolSel": 2,
        "ParamGen": 2,
        "Exec": 2,
        "Synth": 3,
    }


def test_builtin_anchors_are_stratified(registry):
    """Every metric has exactly one anchor per score level"""
    for metric in registry.metrics:
        assert sorted(a.score for a in metric.anchors) == [1, 2, 3, 4, 5]


def test_rubric_levels_run_from_five_down(registry):
    """rubric_for maps a score to its level text"""
    metric = registry.metric("plan.completeness")
    assert metric.rubric_for(5) == metric.rubric[0]
    assert metric.rubric_for(1) == metric.rubric[4]
    assert metric.rubric_for(5).startswith("Complete and optimal")


def test_metric_set_order_is_stable(registry):
    """metrics_for keeps pack order"""
    assert [m.metric_id for m in registry.metrics_for("Synth")] == [
        "synth.faithfulness",
        "synth.completeness",
        "synth.coherence",
    ]


def test_unknown_step_type_has_no_metrics(registry):
    """Looking up an unregistered type raises"""
    with pytest.raises(UnregisteredStepTypeError):
        registry.metrics_for("Retrieve")


# ============================================================================
# Validation
# ============================================================================

def test_missing_anchor_level_is_rejected(registry):
    """A metric without a score-3 anchor fails validation"""
    data = registry.metric("exec.success_rate").model_dump()
    data["anchors"] = [a for a in data["anchors"] if a["score"] != 3]
    with pytest.raises(ValidationError, match="anchors"):
        MetricSpec.model_validate(data)


def test_duplicate_anchor_level_is_rejected(registry):
    """Two anchors at the same level are not a stratified set"""
    data = registry.metric("exec.success_rate").model_dump()
    data["anchors"][0]["score"] = 4 if data["anchors"][0]["score"] != 4 else 3
    with pytest.raises(ValidationError):
        MetricSpec.model_validate(data)


def test_rubric_needs_five_levels(registry):
    """Four level descriptions are not a rubric"""
    data = registry.metric("exec.success_rate").model_dump()
    data["rubric"] = data["rubric"][:4]
    with pytest.raises(ValidationError, match="5 non-empty levels"):
        MetricSpec.model_validate(data)


def test_duplicate_metric_ids_are_rejected(registry):
    """Metric ids are unique within a registry"""
    metric = registry.metric("exec.success_rate")
    with pytest.raises(ValidationError, match="duplicate metric ids"):
        MetricRegistry(metrics=[metric, metric])


# ============================================================================
# Overlay packs
# ============================================================================

def test_overlay_replaces_by_id_and_adds_types(tmp_path, registry):
    """A pack replaces metrics with the same id and may introduce step types"""
    base = registry.metric("exec.success_rate")
    replaced = base.model_copy(update={"description": "Did the call return a usable result?"})
    added = base.model_copy(update={"metric_id": "retrieve.recall", "step_type": "Retrieve", "name": "recall"})

    merged = load_metric_pack(_pack(tmp_path, [replaced, added]), base=registry)

    assert len(merged) == 12
    assert merged.metric("exec.success_rate").description == "Did the call return a usable result?"
    assert "Retrieve" in merged.step_types
    assert merged.content_hash != registry.content_hash


def test_overlay_defaults_to_builtin_base(tmp_path, registry):
    """Without a base the built-in registry is extended"""
    added = registry.metric("synth.coherence").model_copy(update={"metric_id": "synth.tone"})
    assert len(load_metric_pack(_pack(tmp_path, [added]))) == 12


def test_invalid_pack_raises_pack_error(tmp_path):
    """Malformed packs raise MetricPackError"""
    path = tmp_path / "broken.yaml"
    path.write_text("metrics:\n  - metric_id: x\n", encoding="utf-8")
    with pytest.raises(MetricPackError):
        load_metric_pack(path)


def test_unreadable_pack_raises_pack_error(tmp_path):
    """A missing file is a pack error, not an OSError"""
    with pytest.raises(MetricPackError):
        load_metric_pack(tmp_path / "missing.yaml")


# ============================================================================
# Thresholds
# ============================================================================

def test_default_thresholds():
    """ParamGen tolerates 2.5; everything else flags below 3.0"""
    thresholds = ThresholdConfig()
    assert thresholds.for_type("ParamGen") == 2.5
    assert thresholds.for_type("Synth") == 3.0
    assert thresholds.for_type("Retrieve") == 3.0


def test_thresholds_lie_in_open_interval():
    """5.0 would flag everything and is rejected"""
    with pytest.raises(ValidationError):
        ThresholdConfig(thresholds={"Exec": 5.0})
    with pytest.raises(ValidationError):
        ThresholdConfig(thresholds={"Exec": 1.0})


def test_node_override_wins(five_step_chain):
    """A schema threshold override beats the per-type value"""
    node = infer_dag(five_step_chain).node("v3").model_copy(update={"threshold_override": 3.5})
    assert ThresholdConfig().threshold_for(node) == 3.5


def test_threshold_file_overlays_defaults(tmp_path):
    """A threshold file overrides some types and the fallback"""
    path = tmp_path / "thresholds.yaml"
    path.write_text("Exec: 3.5\ndefault: 2.0\n", encoding="utf-8")
    thresholds = load_thresholds(path)
    assert thresholds.for_type("Exec") == 3.5
    assert thresholds.for_type("ParamGen") == 2.5
    assert thresholds.for_type("Retrieve") == 2.0


def test_invalid_threshold_file(tmp_path):
    """Out-of-range thresholds in a file raise MetricPackError"""
    path = tmp_path / "thresholds.yaml"
    path.write_text("Exec: 7\n", encoding="utf-8")
    with pytest.raises(MetricPackError):
        load_thresholds(path)
