"""Step judges: prompt assembly, verdict parsing, the tiered remote judge and the rule judge."""

import hashlib
import json
import re
import time
from fnmatch import fnmatchcase
from functools import lru_cache
from importlib.resources import files
from pathlib import Path
from threading import Lock
from typing import Any, Literal, Protocol

import httpx
import jinja2
import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ageval.errors import JudgeError, JudgeUnavailableError, ScoreOutOfRangeError, UnparseableVerdictError
from ageval.models import EvalNode, JudgeVerdict, StepType
from ageval.rubrics import MetricSpec
from ageval.settings import AgevalSettings, get_settings

_SCORE_LINE = re.compile(r"^[ \t]*\**[ \t]*score[ \t]*:[ \t]*\**[ \t]*(-?\d+)[ \t]*\**[ \t]*$", re.IGNORECASE | re.MULTILINE)
_CATEGORY_LINE = re.compile(r"^[ \t]*\**[ \t]*category[ \t]*:[ \t]*\**[ \t]*([\w.-]+)", re.IGNORECASE | re.MULTILINE)

_STEP_LABELS = {
    StepType.PLAN: ("execution plan", "Agent plan"),
    StepType.TOOL_SEL: ("tool selection", "Selected tool"),
    StepType.PARAM_GEN: ("parameter generation", "Generated parameters"),
    StepType.EXEC: ("tool execution", "Execution result"),
    StepType.SYNTH: ("answer synthesis", "Agent answer"),
}


# ---------------------------------------------------------------------------
# Requests and prompts
# ---------------------------------------------------------------------------

class NodeView(BaseModel):
    """What a judge may see of a node: never its scores."""

    model_config = ConfigDict(frozen=True)

    step_type: str
    name: str
    output: str
    reference: str | None = None
    subtask: str = ""
    metadata: dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def from_node(cls, node: EvalNode, subtask: str = "") -> "NodeView":
        return cls(
            step_type=node.step_type,
            name=node.name,
            output=node.output,
            reference=node.reference,
            subtask=subtask,
            metadata=node.metadata,
        )


class JudgeRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    node: NodeView
    node_id: str = ""
    context: str | None = None
    metric: MetricSpec
    tool_list: list[str] | None = None
    query: str | None = None
    corrected_upstream: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _framing(self) -> "JudgeRequest":
        if self.metric.step_type == StepType.PLAN and self.query is None:
            raise ValueError("Plan requests are scored against the user query; query is required")
        if self.metric.step_type != StepType.PLAN and self.context is None:
            raise ValueError(f"{self.metric.step_type} requests need an upstream context (may be empty)")
        return self


class CategoryChoice(BaseModel):
    model_config = ConfigDict(frozen=True)

    level1: str
    level2: str
    name: str
    description: str = ""
    leaves: list[tuple[str, str, str]] = Field(description="(id, name, description) per Level-3 entry")


class ClassificationRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    node: NodeView
    node_id: str = ""
    context: str = ""
    query: str = ""
    verdicts: list[JudgeVerdict] = Field(default_factory=list)
    choices: list[CategoryChoice]


class PromptBundle(BaseModel):
    model_config = ConfigDict(frozen=True)

    system: str
    user: str

    def digest(self, model: str) -> str:
        h = hashlib.sha256()
        for part in (self.system, self.user, model):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


@lru_cache(maxsize=1)
def _environment() -> jinja2.Environment:
    return jinja2.Environment(
        loader=jinja2.PackageLoader("ageval", "templates"),
        autoescape=False,
        undefined=jinja2.StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )


def build_prompt(request: JudgeRequest) -> PromptBundle:
    """Render the system/user prompt pair for one (node, metric) judgement.

    Identical requests render byte-identical bundles.
    """
    env = _environment()
    metric = request.metric
    is_plan = metric.step_type == StepType.PLAN
    step_label, output_label = _STEP_LABELS.get(metric.step_type, (f"{metric.step_type} step", "Agent output"))

    system = env.get_template("judge_system.j2").render(
        step_label=step_label,
        metric=metric,
        is_plan=is_plan,
        levels=[(5 - i, text) for i, text in enumerate(metric.rubric)],
    )
    user = env.get_template("judge_user.j2").render(
        anchors=metric.anchors,
        is_plan=is_plan,
        query=request.query or "",
        context=request.context or "",
        tool_list=request.tool_list,
        corrected_upstream=request.corrected_upstream,
        output_label=output_label,
        output=request.node.output,
        subtask=request.node.subtask,
        reference=request.node.reference,
    )
    return PromptBundle(system=system, user=user)


def build_classification_prompt(request: ClassificationRequest) -> PromptBundle:
    env = _environment()
    system = env.get_template("classify_system.j2").render()
    user = env.get_template("classify_user.j2").render(
        node=request.node,
        context=request.context,
        query=request.query,
        verdicts=request.verdicts,
        choices=request.choices,
    )
    return PromptBundle(system=system, user=user)


def parse_verdict(text: str) -> int:
    """Return N from the last ``Score: N`` line."""
    matches = _SCORE_LINE.findall(text)
    if not matches:
        raise UnparseableVerdictError(f"no 'Score: N' line in judge output ({len(text)} chars)")
    score = int(matches[-1])
    if not 1 <= score <= 5:
        raise ScoreOutOfRangeError(score)
    return score


def render_verdict(score: int, rationale: str = "") -> str:
    return f"{rationale.rstrip()}\nScore: {score}" if rationale.strip() else f"Score: {score}"


def parse_category(text: str) -> str | None:
    matches = _CATEGORY_LINE.findall(text)
    return matches[-1] if matches else None


def _strip_score(text: str) -> str:
    return _SCORE_LINE.sub("", text).strip()


class Judge(Protocol):
    judge_id: str

    def score(self, request: JudgeRequest) -> JudgeVerdict: ...

    def classify(self, request: ClassificationRequest) -> str: ...


# ---------------------------------------------------------------------------
# Remote judge
# ---------------------------------------------------------------------------

class JudgeTier(BaseModel):
    name: str
    endpoint: str
    model: str
    timeout: float = Field(default=30.0, gt=0)
    max_attempts: int = Field(default=2, ge=1)


class JudgeTierConfig(BaseModel):
    tiers: list[JudgeTier] = Field(min_length=1)
    temperature: float = 0.0
    max_tokens: int = 1024


def load_judge_tiers(path: Path | str | None = None) -> JudgeTierConfig:
    try:
        if path is None:
            data = yaml.safe_load(files("ageval").joinpath("data/judge_tiers.yaml").read_text(encoding="utf-8"))
        else:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return JudgeTierConfig.model_validate(data)
    except (OSError, yaml.YAMLError, ValidationError) as e:
        raise JudgeError(f"invalid judge tier config {path or 'built-in'}: {e}") from e


class VerdictCache:
    """Content-addressed verdict cache, optionally mirrored to a directory."""

    def __init__(self, directory: Path | str | None = None):
        self._entries: dict[str, JudgeVerdict] = {}
        self._lock = Lock()
        self._directory = Path(directory) if directory else None
        if self._directory:
            self._directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        assert self._directory is not None
        return self._directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> JudgeVerdict | None:
        with self._lock:
            verdict = self._entries.get(key)
            if verdict is None and self._directory and self._path(key).exists():
                try:
                    verdict = JudgeVerdict.model_validate_json(self._path(key).read_text(encoding="utf-8"))
                except (OSError, ValidationError) as e:
                    logger.debug(
                        "Ignoring unreadable cache entry",
                        extra={"component": "VerdictCache", "key": key, "error": str(e)},
                    )
                    return None
                self._entries[key] = verdict
        if verdict is None:
            return None
        return verdict.model_copy(update={"cached": True, "latency": 0.0})

    def put(self, key: str, verdict: JudgeVerdict) -> None:
        with self._lock:
            self._entries[key] = verdict
            if self._directory:
                path = self._path(key)
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(verdict.model_dump_json(), encoding="utf-8")

    def __len__(self) -> int:
        return len(self._entries)


class _TierFailed(JudgeError):
    pass


class RemoteJudge:
    """Chat-completion judge with tier fallback, re-ask on bad output and a verdict cache."""

    def __init__(
        self,
        config: JudgeTierConfig,
        settings: AgevalSettings | None = None,
        cache: VerdictCache | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config
        self.settings = settings or get_settings()
        self.cache = cache if cache is not None else VerdictCache(self.settings.cache_dir)
        self.judge_id = ">".join(t.name for t in config.tiers)
        self._client = httpx.Client(transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "RemoteJudge":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def _headers(self) -> dict[str, str]:
        headers = {
            "Content-Type": "application/json",
            "User-Agent": f"{self.settings.name}/{self.settings.version}",
        }
        if self.settings.judge_api_key is not None:
            headers["Authorization"] = f"Bearer {self.settings.judge_api_key.get_secret_value()}"
        return headers

    def _complete(self, tier: JudgeTier, bundle: PromptBundle) -> str:
        payload = {
            "model": tier.model,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        response = self._client.post(tier.endpoint, json=payload, headers=self._headers(), timeout=tier.timeout)
        response.raise_for_status()
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise UnparseableVerdictError(f"malformed completion body from {tier.name}") from e

    def _ask(self, tier: JudgeTier, bundle: PromptBundle, parse: bool) -> str:
        """Return raw text from one tier; transport errors retry, a bad verdict is re-asked once."""
        transport_failures = 0
        reasked = False
        while True:
            try:
                text = self._complete(tier, bundle)
            except httpx.HTTPStatusError as e:
                transport_failures += 1
                logger.warning(
                    "Judge tier returned HTTP error",
                    extra={"component": "RemoteJudge", "tier": tier.name, "status_code": e.response.status_code},
                )
                if transport_failures >= tier.max_attempts:
                    raise _TierFailed(f"{tier.name}: HTTP {e.response.status_code}") from e
                continue
            except httpx.TransportError as e:
                transport_failures += 1
                logger.warning(
                    "Judge tier unreachable",
                    extra={"component": "RemoteJudge", "tier": tier.name, "error": str(e)},
                )
                if transport_failures >= tier.max_attempts:
                    raise _TierFailed(f"{tier.name}: {type(e).__name__}") from e
                continue
            except UnparseableVerdictError:
                text = ""

            if not parse:
                return text
            try:
                parse_verdict(text)
                return text
            except (UnparseableVerdictError, ScoreOutOfRangeError) as e:
                if reasked:
                    raise _TierFailed(f"{tier.name}: {e}") from e
                reasked = True
                logger.debug(
                    "Re-asking judge after unusable verdict",
                    extra={"component": "RemoteJudge", "tier": tier.name, "error": str(e)},
                )

    def score(self, request: JudgeRequest) -> JudgeVerdict:
        bundle = build_prompt(request)
        metric_id = request.metric.metric_id

        for tier in self.config.tiers:
            hit = self.cache.get(bundle.digest(tier.model))
            if hit is not None:
                return hit

        failures = []
        for tier in self.config.tiers:
            started = time.perf_counter()
            try:
                text = self._ask(tier, bundle, parse=True)
            except _TierFailed as e:
                failures.append(str(e))
                logger.warning(
                    "Falling back to next judge tier",
                    extra={"component": "RemoteJudge", "tier": tier.name, "metric_id": metric_id},
                )
                continue
            verdict = JudgeVerdict(
                metric_id=metric_id,
                score=parse_verdict(text),
                rationale=_strip_score(text),
                judge_id=tier.name,
                latency=time.perf_counter() - started,
            )
            self.cache.put(bundle.digest(tier.model), verdict)
            logger.debug(
                "Verdict received",
                extra={"component": "RemoteJudge", "tier": tier.name, "node_id": request.node_id, "metric_id": metric_id, "score": verdict.score},
            )
            return verdict

        logger.error(
            "All judge tiers exhausted",
            extra={"component": "RemoteJudge", "node_id": request.node_id, "metric_id": metric_id},
        )
        raise JudgeUnavailableError(f"all {len(self.config.tiers)} tiers failed for {metric_id}: {'; '.join(failures)}")

    def classify(self, request: ClassificationRequest) -> str:
        bundle = build_classification_prompt(request)
        failures = []
        for tier in self.config.tiers:
            try:
                return self._ask(tier, bundle, parse=False)
            except _TierFailed as e:
                failures.append(str(e))
        raise JudgeUnavailableError(f"classification failed on every tier: {'; '.join(failures)}")


def llm_judge(request: JudgeRequest, config: JudgeTierConfig, transport: httpx.BaseTransport | None = None) -> JudgeVerdict:
    with RemoteJudge(config, transport=transport) as judge:
        return judge.score(request)


# ---------------------------------------------------------------------------
# Rule judge
# ---------------------------------------------------------------------------

class Rule(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric_id: str | None = Field(default=None, description="Glob over metric ids")
    step_type: str | None = None
    node: str | None = Field(default=None, description="Glob over node id or name")
    field: Literal["output", "context", "reference", "metadata", "corrected", "any"] = "output"
    pattern: str = ""
    regex: bool = False
    unless_corrected: bool = Field(
        default=False,
        description="Skip when the matched source (regex group 'source', else any) was corrected upstream",
    )
    score: float = Field(ge=1.0, le=5.0)
    rationale: str = ""

    def _haystack(self, request: JudgeRequest) -> str:
        node = request.node
        parts = {
            "output": node.output,
            "context": request.context or "",
            "reference": node.reference or "",
            "metadata": "\n".join(
                f"{k}={v if isinstance(v, str) else json.dumps(v)}" for k, v in sorted(node.metadata.items())
            ),
            "corrected": "\n".join(request.corrected_upstream[k] for k in sorted(request.corrected_upstream)),
        }
        if self.field == "any":
            return "\n".join(parts.values())
        return parts[self.field]

    def matches(self, request: JudgeRequest) -> bool:
        if self.metric_id is not None and not fnmatchcase(request.metric.metric_id, self.metric_id):
            return False
        if self.step_type is not None and request.node.step_type != self.step_type:
            return False
        if self.node is not None and not (
            fnmatchcase(request.node_id, self.node) or fnmatchcase(request.node.name, self.node)
        ):
            return False

        haystack = self._haystack(request)
        if not self.regex:
            if self.pattern not in haystack:
                return False
            return not (self.unless_corrected and request.corrected_upstream)

        matches = list(re.finditer(self.pattern, haystack))
        if not matches:
            return False
        if not self.unless_corrected:
            return True
        for match in matches:
            source = match.groupdict().get("source")
            if source is None:
                return not request.corrected_upstream
            if source not in request.corrected_upstream:
                return True
        return False


class RuleSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    rules: list[Rule] = Field(default_factory=list)
    default_score: float = Field(default=3.0, ge=1.0, le=5.0)

    @property
    def content_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def load_rules(path: Path | str | None = None) -> RuleSet:
    try:
        if path is None:
            data = yaml.safe_load(files("ageval").joinpath("data/rules.yaml").read_text(encoding="utf-8"))
        else:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, list):
            data = {"rules": data}
        return RuleSet.model_validate(data)
    except (OSError, yaml.YAMLError, ValidationError) as e:
        raise JudgeError(f"invalid rule set {path or 'built-in'}: {e}") from e


_FAIL_MARKER = re.compile(r"FAIL::([A-Za-z0-9_]+)")


class RuleJudge:
    """Deterministic pattern judge; first matching rule wins."""

    def __init__(self, rules: RuleSet):
        self.rules = rules
        self.judge_id = f"rule:{rules.content_hash}"

    def score(self, request: JudgeRequest) -> JudgeVerdict:
        for index, rule in enumerate(self.rules.rules):
            if rule.matches(request):
                return JudgeVerdict(
                    metric_id=request.metric.metric_id,
                    score=rule.score,
                    rationale=rule.rationale or f"rule {index} matched",
                    judge_id=self.judge_id,
                )
        return JudgeVerdict(
            metric_id=request.metric.metric_id,
            score=self.rules.default_score,
            rationale="no rule matched",
            judge_id=self.judge_id,
        )

    def classify(self, request: ClassificationRequest) -> str:
        marker = _FAIL_MARKER.search(request.node.output)
        return f"Category: {marker.group(1) if marker else 'none'}"


def rule_judge(request: JudgeRequest, rules: RuleSet) -> JudgeVerdict:
    return RuleJudge(rules).score(request)
