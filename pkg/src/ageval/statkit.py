"""Statistics primitives: bootstrap intervals and tests, agreement coefficients, detection metrics."""

import json
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from importlib.resources import files

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

from ageval.errors import (
    DegenerateMarginalsError,
    LengthMismatchError,
    RaggedGridError,
    StatisticsError,
    UnknownNodeError,
)
from ageval.models import EvalDAG

DEFAULT_RESAMPLES = 10_000
_TIE_EPSILON = 1e-12


def rng(seed: int, *streams: int) -> np.random.Generator:
    """Counter-based generator; each (seed, *streams) key is an independent, reproducible stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *streams])))


def bootstrap_ci(
    samples: Sequence[float],
    statistic: Callable[[np.ndarray], float] | None = None,
    resamples: int = DEFAULT_RESAMPLES,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval; the statistic defaults to the mean."""
    data = np.asarray(samples, dtype=float)
    if data.size == 0:
        raise StatisticsError("bootstrap_ci needs at least one sample")
    if not 0.0 < level < 1.0:
        raise StatisticsError(f"level must lie in (0, 1), got {level}")

    indexes = rng(seed).integers(0, data.size, size=(resamples, data.size))
    if statistic is None:
        stats = data[indexes].mean(axis=1)
    else:
        stats = np.array([statistic(data[row]) for row in indexes], dtype=float)

    alpha = 1.0 - level
    lo, hi = np.percentile(stats, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)])
    return float(lo), float(hi)


def paired_bootstrap_test(
    baseline: Sequence[float],
    candidate: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> float:
    """Two-sided p-value for a non-zero mean paired difference.

    Differences are centered on their mean to impose the null, then
    resampled; p = (#{|boot| >= |observed|} + 1) / (resamples + 1).
    """
    base = np.asarray(baseline, dtype=float)
    cand = np.asarray(candidate, dtype=float)
    if base.shape != cand.shape:
        raise LengthMismatchError(f"paired vectors differ in length: {base.size} vs {cand.size}")
    if base.size == 0:
        raise StatisticsError("paired_bootstrap_test needs at least one pair")

    diffs = cand - base
    observed = diffs.mean()
    centered = diffs - observed
    indexes = rng(seed).integers(0, diffs.size, size=(resamples, diffs.size))
    boot = centered[indexes].mean(axis=1)
    extreme = int(np.count_nonzero(np.abs(boot) >= abs(observed) - _TIE_EPSILON))
    return (extreme + 1) / (resamples + 1)


# ---------------------------------------------------------------------------
# Agreement
# ---------------------------------------------------------------------------

class ConfusionMatrix(BaseModel):
    """Rows are the reference rater, columns the candidate."""

    model_config = ConfigDict(frozen=True)

    labels: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    counts: list[list[int]]

    @model_validator(mode="after")
    def _square(self) -> "ConfusionMatrix":
        k = len(self.labels)
        if len(self.counts) != k or any(len(row) != k for row in self.counts):
            raise ValueError(f"confusion matrix must be {k}x{k}")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("confusion matrix entries must be non-negative")
        return self

    @computed_field
    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    @property
    def diagonal(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.labels)))

    @property
    def row_totals(self) -> list[int]:
        return [sum(row) for row in self.counts]

    @property
    def col_totals(self) -> list[int]:
        return [sum(col) for col in zip(*self.counts)]

    @classmethod
    def from_pairs(cls, reference: Iterable[int], candidate: Iterable[int], labels: list[int] | None = None) -> "ConfusionMatrix":
        labels = labels or [1, 2, 3, 4, 5]
        index = {label: i for i, label in enumerate(labels)}
        counts = [[0] * len(labels) for _ in labels]
        ref, cand = list(reference), list(candidate)
        if len(ref) != len(cand):
            raise LengthMismatchError(f"rating vectors differ in length: {len(ref)} vs {len(cand)}")
        for r, c in zip(ref, cand):
            counts[index[r]][index[c]] += 1
        return cls(labels=labels, counts=counts)


def load_confusion(name: str = "judge_agreement.json") -> ConfusionMatrix:
    """Load a shipped confusion-matrix fixture."""
    return ConfusionMatrix.model_validate(json.loads(files("ageval").joinpath(f"data/{name}").read_text(encoding="utf-8")))


def cohen_kappa(matrix: ConfusionMatrix) -> float:
    """Unweighted Cohen's kappa."""
    total = matrix.total
    if total == 0:
        raise StatisticsError("confusion matrix is empty")
    p_o = matrix.diagonal / total
    p_e = sum(r * c for r, c in zip(matrix.row_totals, matrix.col_totals)) / total**2
    if p_e >= 1.0:
        raise DegenerateMarginalsError("expected agreement is 1; kappa undefined")
    return (p_o - p_e) / (1.0 - p_e)


def fleiss_kappa(ratings: Sequence[Sequence[int]]) -> float:
    """Fleiss' kappa over an items x categories grid of rater counts."""
    grid = [list(row) for row in ratings]
    if not grid:
        raise StatisticsError("ratings grid is empty")
    width = len(grid[0])
    if any(len(row) != width for row in grid):
        raise RaggedGridError("every item must have a count for each category")
    counts = np.asarray(grid, dtype=float)
    raters = counts.sum(axis=1)
    if not np.all(raters == raters[0]):
        raise RaggedGridError("every item must be rated by the same number of raters")
    n = raters[0]
    if n < 2:
        raise StatisticsError("fleiss_kappa needs at least two raters per item")

    per_item = ((counts**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = per_item.mean()
    shares = counts.sum(axis=0) / counts.sum()
    p_e = float((shares**2).sum())
    if p_e >= 1.0:
        raise DegenerateMarginalsError("a single category was used throughout; kappa undefined")
    return float((p_bar - p_e) / (1.0 - p_e))


def binary_agreement(matrix: ConfusionMatrix, threshold: float = 3.0) -> float:
    """Share of ratings on the same side of pass/fail, pass meaning score > threshold."""
    total = matrix.total
    if total == 0:
        raise StatisticsError("confusion matrix is empty")
    agree = 0
    for i, ref_label in enumerate(matrix.labels):
        for j, cand_label in enumerate(matrix.labels):
            if (ref_label > threshold) == (cand_label > threshold):
                agree += matrix.counts[i][j]
    return agree / total


# ---------------------------------------------------------------------------
# Framework-quality metrics
# ---------------------------------------------------------------------------

class DetectionTruth(BaseModel):
    model_config = ConfigDict(frozen=True)

    trace_id: str
    node_id: str
    failing: bool
    flagged: bool
    true_root: str | None = None
    attributed_root: str | None = None
    reference_score: float | None = None
    candidate_score: float | None = None


class DetectionMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fdrec: float | None
    fpr: float | None
    rca: float | None
    binary_agreement: float | None
    failing: int
    clean: int
    with_root: int


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def detection_metrics(truths: Sequence[DetectionTruth], pass_threshold: float = 3.0) -> DetectionMetrics:
    """FDRec, FPR, RCA and binary agreement; empty denominators yield None."""
    if not truths:
        raise StatisticsError("detection_metrics needs at least one step record")

    failing = [t for t in truths if t.failing]
    clean = [t for t in truths if not t.failing]
    rooted = [t for t in truths if t.true_root is not None]
    scored = [t for t in truths if t.reference_score is not None and t.candidate_score is not None]

    return DetectionMetrics(
        fdrec=_ratio(sum(t.flagged for t in failing), len(failing)),
        fpr=_ratio(sum(t.flagged for t in clean), len(clean)),
        rca=_ratio(sum(t.attributed_root == t.true_root for t in rooted), len(rooted)),
        binary_agreement=_ratio(
            sum((t.reference_score > pass_threshold) == (t.candidate_score > pass_threshold) for t in scored),
            len(scored),
        ),
        failing=len(failing),
        clean=len(clean),
        with_root=len(rooted),
    )


def rca_hop_distance(dag: EvalDAG, attributed: str, true_root: str) -> int | None:
    """Undirected shortest-path hop count; None when the pair is disconnected."""
    ids = set(dag.node_ids())
    for node_id in (attributed, true_root):
        if node_id not in ids:
            raise UnknownNodeError(node_id)
    neighbours: dict[str, set[str]] = {n: set() for n in ids}
    for a, b in dag.edges:
        neighbours[a].add(b)
        neighbours[b].add(a)

    distance = {attributed: 0}
    queue = deque([attributed])
    while queue:
        current = queue.popleft()
        if current == true_root:
            return distance[current]
        for nxt in neighbours[current]:
            if nxt not in distance:
                distance[nxt] = distance[current] + 1
                queue.append(nxt)
    return None
