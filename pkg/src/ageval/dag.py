"""Evaluation DAG reconstruction, non-DAG normalization and schema alignment."""

import heapq
from collections import deque
from fnmatch import fnmatchcase
from pathlib import Path

import yaml
from loguru import logger
from pydantic import ValidationError

from ageval.errors import AlignmentError, CycleError, DagError, UnknownNodeError
from ageval.models import (
    DagOrigin,
    DagSchema,
    DeviationReport,
    EvalDAG,
    EvalNode,
    StepRecord,
    Trace,
    UnrollEvent,
)

DEFAULT_UNROLL_LIMIT = 5


def _dedupe(edges: list[tuple[str, str]]) -> list[tuple[str, str]]:
    seen: set[tuple[str, str]] = set()
    result = []
    for edge in edges:
        if edge not in seen:
            seen.add(edge)
            result.append(edge)
    return result


def _node_from_step(step: StepRecord) -> EvalNode:
    return EvalNode(
        id=step.step_id,
        step_type=step.step_type,
        name=step.name,
        input=step.input,
        output=step.output,
        reference=step.reference,
        source_step_ids=[step.step_id],
        started_at=step.started_at,
        ended_at=step.ended_at,
        attempt=step.attempt,
        declared_parents=list(step.parent_ids),
        metadata=dict(step.metadata),
    )


def infer_dag(trace: Trace) -> EvalDAG:
    """Transcribe parent_ids into edges.

    When no step declares a parent, steps are chained in started_at order
    (ties keep file order).
    """
    steps = list(trace.steps)
    nodes = [_node_from_step(s) for s in steps]

    if len(steps) > 1 and all(not s.parent_ids for s in steps):
        order = sorted(range(len(steps)), key=lambda i: (steps[i].started_at, i))
        edges = [(steps[a].step_id, steps[b].step_id) for a, b in zip(order, order[1:])]
        logger.debug(
            "No dependency info, inferred sequential chain",
            extra={"component": "infer_dag", "trace_id": trace.trace_id, "steps": len(steps)},
        )
    else:
        edges = _dedupe([(p, s.step_id) for s in steps for p in s.parent_ids])

    return EvalDAG(
        trace_id=trace.trace_id,
        workflow_id=trace.workflow_id,
        query=trace.query,
        nodes=nodes,
        edges=edges,
        origin=DagOrigin.TRACE_INFERRED,
    )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _flat_fallback(g: EvalDAG, reason: str, node_ids: list[str]) -> EvalDAG:
    logger.warning(
        "DAG reconstruction failed, falling back to flat evaluation",
        extra={"component": "normalize", "trace_id": g.trace_id, "reason": reason},
    )
    return g.model_copy(
        update={
            "edges": [],
            "origin": DagOrigin.FLAT_FALLBACK,
            "fallback_reason": reason,
            "unroll_log": [*g.unroll_log, UnrollEvent(kind="flat_fallback", node_ids=node_ids, detail=reason)],
        }
    )


def _strongly_connected(node_ids: list[str], edges: list[tuple[str, str]]) -> list[list[str]]:
    """Tarjan's algorithm, iterative."""
    succ: dict[str, list[str]] = {n: [] for n in node_ids}
    for a, b in edges:
        succ[a].append(b)

    index: dict[str, int] = {}
    low: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    components: list[list[str]] = []
    counter = 0

    for root in node_ids:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
            descended = False
            for j in range(i, len(succ[v])):
                w = succ[v][j]
                if w not in index:
                    work.append((v, j + 1))
                    work.append((w, 0))
                    descended = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if descended:
                continue
            if low[v] == index[v]:
                component = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    component.append(w)
                    if w == v:
                        break
                components.append(component)
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
    return components


def _unroll_retries(g: EvalDAG, unroll_limit: int) -> EvalDAG | str:
    """Unroll retry groups; returns the new DAG or a fallback reason."""
    groups: dict[tuple[str, str, tuple[str, ...]], list[EvalNode]] = {}
    for node in g.nodes:
        if node.attempt is None:
            continue
        key = (node.name, node.step_type, tuple(sorted(node.declared_parents)))
        groups.setdefault(key, []).append(node)

    nodes = {n.id: n for n in g.nodes}
    edges = list(g.edges)
    log = list(g.unroll_log)

    for (name, _, parents), members in groups.items():
        if len(members) < 2:
            continue
        if len(members) > unroll_limit:
            return f"unroll limit exceeded: {name!r} has {len(members)} attempts (limit {unroll_limit})"

        members = sorted(members, key=lambda n: (n.attempt, n.started_at, n.id))
        canonical = members[-1]
        member_ids = {m.id for m in members}
        label = f"{name}@{'+'.join(parents) or 'root'}"

        external_in = _dedupe([(a, b) for a, b in edges if b in member_ids and a not in member_ids])
        sources = [a for a, _ in external_in]

        rewired = []
        for a, b in edges:
            if a in member_ids and b in member_ids:
                continue
            if a in member_ids:
                a = canonical.id
            rewired.append((a, b))
        for member in members:
            for source in sources:
                rewired.append((source, member.id))
        rewired = _dedupe(rewired)

        flags_changed = False
        for member in members:
            updated = member.model_copy(update={"retry_group": label, "canonical": member.id == canonical.id})
            if updated != nodes[member.id]:
                flags_changed = True
                nodes[member.id] = updated

        if rewired != edges or flags_changed:
            log.append(
                UnrollEvent(
                    kind="retry_unroll",
                    node_ids=[m.id for m in members],
                    detail=f"{len(members)} attempts of {name!r}, canonical {canonical.id}",
                )
            )
        edges = rewired

    return g.model_copy(update={"nodes": [nodes[n.id] for n in g.nodes], "edges": edges, "unroll_log": log})


def _resolve_cycles(g: EvalDAG) -> EvalDAG | tuple[str, list[str]]:
    """Direct intra-cycle edges forward in time; identical timestamps are irreducible."""
    started = {n.id: n.started_at for n in g.nodes}
    edges = list(g.edges)
    log = list(g.unroll_log)

    for component in _strongly_connected(g.node_ids(), edges):
        members = set(component)
        if len(component) == 1:
            node_id = component[0]
            if (node_id, node_id) in edges:
                edges = [e for e in edges if e != (node_id, node_id)]
                log.append(UnrollEvent(kind="branch_resolution", node_ids=[node_id], detail="self-loop dropped"))
            continue

        times = [started[n] for n in component]
        if len(set(times)) < len(times):
            return "cycle with identical timestamps", sorted(component)

        resolved = []
        for a, b in edges:
            if a in members and b in members and started[a] > started[b]:
                a, b = b, a
            resolved.append((a, b))
        edges = _dedupe(resolved)
        ordered = sorted(component, key=lambda n: started[n])
        log.append(
            UnrollEvent(kind="branch_resolution", node_ids=ordered, detail="edges directed by started_at")
        )

    if edges == list(g.edges):
        return g
    return g.model_copy(update={"edges": edges, "unroll_log": log})


def normalize(g: EvalDAG, unroll_limit: int = DEFAULT_UNROLL_LIMIT) -> EvalDAG:
    """Make a reconstructed graph evaluable.

    Retry groups are unrolled with the last attempt as the canonical node,
    cycles among distinctly-timestamped steps are broken by time order, and
    anything irreducible becomes a FlatFallback DAG with its reason recorded.
    Idempotent.
    """
    if g.origin == DagOrigin.FLAT_FALLBACK:
        return g

    unrolled = _unroll_retries(g, unroll_limit)
    if isinstance(unrolled, str):
        return _flat_fallback(g, unrolled, g.node_ids())

    resolved = _resolve_cycles(unrolled)
    if isinstance(resolved, tuple):
        reason, witness = resolved
        return _flat_fallback(g, reason, witness)

    try:
        topological_order(resolved)
    except CycleError as e:
        return _flat_fallback(g, f"irreducible cycle: {' -> '.join(e.witness)}", e.witness)

    if resolved.unroll_log != g.unroll_log:
        logger.debug(
            "DAG normalized",
            extra={
                "component": "normalize",
                "trace_id": g.trace_id,
                "events": len(resolved.unroll_log) - len(g.unroll_log),
            },
        )
    return resolved


# ---------------------------------------------------------------------------
# Traversal
# ---------------------------------------------------------------------------

def _adjacency(g: EvalDAG) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
    succ: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    pred: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    for a, b in _dedupe(list(g.edges)):
        if a not in succ:
            raise UnknownNodeError(a)
        if b not in succ:
            raise UnknownNodeError(b)
        succ[a].append(b)
        pred[b].append(a)
    return succ, pred


def _cycle_witness(remaining: set[str], pred: dict[str, list[str]]) -> list[str]:
    current = min(remaining)
    path: list[str] = []
    position: dict[str, int] = {}
    while current not in position:
        position[current] = len(path)
        path.append(current)
        current = next(p for p in sorted(pred[current]) if p in remaining)
    cycle = path[position[current]:]
    cycle.reverse()
    return [*cycle, cycle[0]]


def topological_order(g: EvalDAG) -> list[str]:
    """Kahn's algorithm; ready nodes are released by (started_at, id)."""
    succ, pred = _adjacency(g)
    started = {n.id: n.started_at for n in g.nodes}
    indegree = {n: len(pred[n]) for n in succ}

    ready = [(started[n], n) for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        _, node_id = heapq.heappop(ready)
        order.append(node_id)
        for child in succ[node_id]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, (started[child], child))

    if len(order) < len(succ):
        remaining = {n for n, d in indegree.items() if d > 0}
        raise CycleError(_cycle_witness(remaining, pred))
    return order


def _reach(start: str, step: dict[str, list[str]]) -> set[str]:
    found: set[str] = set()
    queue = deque(step[start])
    while queue:
        node_id = queue.popleft()
        if node_id in found:
            continue
        found.add(node_id)
        queue.extend(step[node_id])
    found.discard(start)
    return found


def descendants(g: EvalDAG, node_id: str) -> set[str]:
    succ, _ = _adjacency(g)
    if node_id not in succ:
        raise UnknownNodeError(node_id)
    return _reach(node_id, succ)


def ancestors(g: EvalDAG, node_id: str) -> set[str]:
    _, pred = _adjacency(g)
    if node_id not in pred:
        raise UnknownNodeError(node_id)
    return _reach(node_id, pred)


# ---------------------------------------------------------------------------
# Schema alignment
# ---------------------------------------------------------------------------

def load_schema(path: str | Path) -> DagSchema:
    """Load a DagSchema document (YAML or JSON)."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return DagSchema.model_validate(data)
    except (yaml.YAMLError, ValidationError) as e:
        raise DagError(f"invalid schema {path}: {e}") from e


def apply_schema(g: EvalDAG, schema: DagSchema) -> tuple[EvalDAG, DeviationReport]:
    """Align nodes to schema entries greedily in topological order.

    An entry claims the first node it matches plus that node's retry
    siblings; later matches are unexpected nodes.
    """
    order = topological_order(g)
    nodes = {n.id: n for n in g.nodes}

    claimed: dict[str, list[str]] = {}
    entry_of: dict[str, str] = {}
    overrides: dict[str, float] = {}
    unexpected_nodes: list[str] = []

    for node_id in order:
        node = nodes[node_id]
        matches = [
            e for e in schema.expected_nodes
            if e.step_type == node.step_type and fnmatchcase(node.name, e.match)
        ]
        if len(matches) > 1:
            raise AlignmentError(node_id, [m.match for m in matches])
        if not matches:
            unexpected_nodes.append(node_id)
            continue

        entry = matches[0]
        owners = claimed.get(entry.ref)
        is_sibling = owners is not None and node.retry_group is not None and any(
            nodes[o].retry_group == node.retry_group for o in owners
        )
        if owners is None or is_sibling:
            claimed.setdefault(entry.ref, []).append(node_id)
            entry_of[node_id] = entry.ref
            if entry.threshold_override is not None:
                overrides[node_id] = entry.threshold_override
        else:
            unexpected_nodes.append(node_id)

    missing_required = [e.ref for e in schema.expected_nodes if e.required and e.ref not in claimed]

    unexpected_edges: list[tuple[str, str]] = []
    missing_edges: list[tuple[str, str]] = []
    if g.origin != DagOrigin.FLAT_FALLBACK:
        expected = {tuple(e) for e in schema.expected_edges}
        observed: set[tuple[str, str]] = set()
        for a, b in g.edges:
            ea, eb = entry_of.get(a), entry_of.get(b)
            if ea is None or eb is None or ea == eb:
                continue
            observed.add((ea, eb))
            if (ea, eb) not in expected:
                unexpected_edges.append((a, b))
        missing_edges = [
            (ra, rb) for ra, rb in schema.expected_edges
            if ra in claimed and rb in claimed and (ra, rb) not in observed
        ]

    report = DeviationReport(
        missing_required=missing_required,
        unexpected_nodes=unexpected_nodes,
        unexpected_edges=unexpected_edges,
        missing_edges=missing_edges,
    )

    origin = g.origin
    if origin != DagOrigin.FLAT_FALLBACK and not missing_required:
        origin = DagOrigin.SCHEMA_ALIGNED

    aligned = g.model_copy(
        update={
            "nodes": [
                n.model_copy(update={"threshold_override": overrides[n.id]}) if n.id in overrides else n
                for n in g.nodes
            ],
            "origin": origin,
        }
    )
    if report.deviant:
        logger.info(
            "Structural deviation from schema",
            extra={
                "component": "apply_schema",
                "trace_id": g.trace_id,
                "schema_id": schema.schema_id,
                "missing_required": len(missing_required),
                "unexpected_nodes": len(unexpected_nodes),
                "unexpected_edges": len(unexpected_edges),
            },
        )
    return aligned, report
