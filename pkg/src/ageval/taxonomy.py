"""Three-level failure taxonomy and post-flag failure classification."""

from importlib.resources import files
from pathlib import Path

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ageval.errors import DuplicateTaxonomyIdError, TaxonomyDepthError, TaxonomyError
from ageval.judge import CategoryChoice, ClassificationRequest, Judge, NodeView, parse_category
from ageval.models import EvalNode, FailureLabel, JudgeVerdict

UNCLASSIFIED = "unclassified"
TAXONOMY_DEPTH = 3


class TaxonomyNode(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    name: str
    description: str = ""
    example: str = ""
    frequency: float | None = Field(default=None, ge=0, description="Level-2 share of the development corpus, percent")
    children: list["TaxonomyNode"] = Field(default_factory=list)


class Taxonomy(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: str = "1"
    step_types: dict[str, str] = Field(default_factory=dict, description="Step type -> Level-1 id for degraded labels")
    categories: list[TaxonomyNode]

    @model_validator(mode="after")
    def _structure(self) -> "Taxonomy":
        seen: set[str] = set()

        def walk(node: TaxonomyNode, path: list[str]) -> None:
            path = [*path, node.id]
            if node.id in seen:
                raise DuplicateTaxonomyIdError(f"duplicate taxonomy id {node.id!r}")
            seen.add(node.id)
            if len(path) > TAXONOMY_DEPTH or (not node.children and len(path) != TAXONOMY_DEPTH):
                raise TaxonomyDepthError(path)
            for child in node.children:
                walk(child, path)

        for root in self.categories:
            walk(root, [])
        return self

    def level1(self) -> list[TaxonomyNode]:
        return list(self.categories)

    def level2(self) -> list[tuple[str, TaxonomyNode]]:
        return [(l1.id, l2) for l1 in self.categories for l2 in l1.children]

    def leaves(self) -> list[tuple[str, str, TaxonomyNode]]:
        return [(l1.id, l2.id, leaf) for l1 in self.categories for l2 in l1.children for leaf in l2.children]

    def counts(self) -> tuple[int, int, int]:
        return len(self.level1()), len(self.level2()), len(self.leaves())

    def path_of(self, leaf_id: str) -> tuple[str, str, str] | None:
        return next(((l1, l2, leaf.id) for l1, l2, leaf in self.leaves() if leaf.id == leaf_id), None)

    def label(self, leaf_id: str, rationale: str = "") -> FailureLabel:
        path = self.path_of(leaf_id)
        if path is None:
            raise TaxonomyError(f"unknown Level-3 id {leaf_id!r}")
        return FailureLabel(level1=path[0], level2=path[1], level3=path[2], rationale=rationale)

    def level1_for(self, step_type: str) -> str:
        return self.step_types.get(step_type, UNCLASSIFIED)

    def resolves(self, label: FailureLabel) -> bool:
        """True when the label names a real path (degraded labels resolve at Level 1)."""
        if label.level2 == UNCLASSIFIED and label.level3 == UNCLASSIFIED:
            return label.level1 == UNCLASSIFIED or any(l1.id == label.level1 for l1 in self.categories)
        return self.path_of(label.level3) == (label.level1, label.level2, label.level3)

    def level2_frequencies(self) -> dict[str, float]:
        return {l2.id: l2.frequency for _, l2 in self.level2() if l2.frequency is not None}

    def level2_of(self, leaf_id: str) -> str | None:
        path = self.path_of(leaf_id)
        return path[1] if path else None

    def choices(self) -> list[CategoryChoice]:
        return [
            CategoryChoice(
                level1=l1,
                level2=l2.id,
                name=l2.name,
                description=l2.description,
                leaves=[(leaf.id, leaf.name, leaf.description) for leaf in l2.children],
            )
            for l1, l2 in self.level2()
        ]


def _from_data(data: object, source: str) -> Taxonomy:
    try:
        return Taxonomy.model_validate(data)
    except ValidationError as e:
        raise TaxonomyError(f"{source}: {e}") from e


def load_taxonomy(path: Path | str | None = None) -> Taxonomy:
    """Load a taxonomy file, or the built-in one when no path is given."""
    try:
        if path is None:
            text = files("ageval").joinpath("data/taxonomy.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as e:
        raise TaxonomyError(f"cannot read taxonomy {path}: {e}") from e

    taxonomy = _from_data(data, str(path or "built-in taxonomy"))
    logger.debug(
        "Taxonomy loaded",
        extra={"component": "load_taxonomy", "path": str(path or "built-in"), "counts": taxonomy.counts()},
    )
    return taxonomy


def dump_taxonomy(taxonomy: Taxonomy) -> str:
    l1, l2, l3 = taxonomy.counts()
    lines = [f"# taxonomy {taxonomy.version}: {l1} level-1, {l2} level-2, {l3} level-3"]
    for level1 in taxonomy.categories:
        lines.append(f"{level1.id}  {level1.name}")
        for level2 in level1.children:
            share = f"  [{level2.frequency:g}%]" if level2.frequency is not None else ""
            lines.append(f"  {level1.id}/{level2.id}  {level2.name}{share}")
            for leaf in level2.children:
                lines.append(f"    {level1.id}/{level2.id}/{leaf.id}  {leaf.name}: {leaf.description}")
    return "\n".join(lines) + "\n"


def classify_failure(
    node: EvalNode,
    verdicts: list[JudgeVerdict],
    taxonomy: Taxonomy,
    judge: Judge,
    context: str = "",
    query: str = "",
) -> FailureLabel:
    """Label an already-flagged node; the label never feeds back into scoring or attribution.

    A judge answer outside the taxonomy is retried once, after which a
    Level-1-only label (from the step type) is returned.
    """
    request = ClassificationRequest(
        node=NodeView.from_node(node),
        node_id=node.id,
        context=context,
        query=query,
        verdicts=verdicts,
        choices=taxonomy.choices(),
    )

    answers = []
    for _ in range(2):
        text = judge.classify(request)
        token = parse_category(text)
        if token is not None and taxonomy.path_of(token) is not None:
            return taxonomy.label(token, rationale=text.strip()[:500])
        answers.append(token or "<none>")

    logger.warning(
        "Classifier returned no taxonomy id, using degraded label",
        extra={"component": "classify_failure", "node_id": node.id, "answers": answers},
    )
    return FailureLabel(
        level1=taxonomy.level1_for(node.step_type),
        level2=UNCLASSIFIED,
        level3=UNCLASSIFIED,
        rationale=f"classifier answers outside taxonomy: {', '.join(answers)}",
    )
