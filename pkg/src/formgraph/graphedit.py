"""The evolving line graph and the edit steps that rewrite it.

Nodes start as single text lines and become entities as edits contract them.
An edit step runs merge contraction, then group contraction, then pruning,
using the scores the most recent stage attached to the graph. All operations
return new graphs; nothing mutates in place.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .constants import EDIT_THRESHOLDS, RELATIONSHIP_THRESHOLD, EditThresholds
from .docmodel import ClassSet, TextLine
from .errors import DataError, UsageError
from .geometry import BBox, union_bbox
from .numerics import exact_mean_vectors


class EdgeScores(NamedTuple):
    """Sigmoid outputs of an edge head, in head order."""

    prune: float
    merge: float
    group: float
    relationship: float

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EdgeScores":
        if arr.shape != (4,):
            raise UsageError(f"edge score vector has shape {arr.shape}, expected (4,)")
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True, eq=False)
class GraphNode:
    """A candidate entity: a set of input lines with their current visual boxes.

    Merge contraction fuses boxes into one; group contraction keeps them
    distinct. class_scores is the node's current class distribution.
    """

    id: int
    line_ids: frozenset[int]
    boxes: tuple[BBox, ...]
    class_scores: tuple[float, ...]
    feat: np.ndarray | None = None
    initial: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class GraphEdge:
    """An undirected edge between node ids a < b."""

    a: int
    b: int
    feat: np.ndarray | None = None
    initial: np.ndarray | None = None
    scores: EdgeScores | None = None


@dataclass(frozen=True)
class EditRecord:
    """One applied sub-operation: which nodes fused or which edges vanished."""

    iteration: int
    op: str  # merge | group | prune | finalize
    targets: tuple[tuple[int, ...], ...]

    def to_json(self) -> dict:
        return {"iteration": self.iteration, "op": self.op, "targets": [list(t) for t in self.targets]}


class FormGraph:
    """Immutable undirected graph over candidate entities."""

    def __init__(
        self,
        nodes: Mapping[int, GraphNode],
        edges: Mapping[tuple[int, int], GraphEdge],
        edit_log: tuple[EditRecord, ...] = (),
    ):
        for nid, node in nodes.items():
            if nid != node.id:
                raise UsageError(f"node keyed {nid} carries id {node.id}")
        for key, edge in edges.items():
            a, b = key
            if a >= b:
                raise UsageError(f"edge key {key} is not (low, high)")
            if (edge.a, edge.b) != key:
                raise UsageError(f"edge keyed {key} carries ids ({edge.a}, {edge.b})")
            if a not in nodes or b not in nodes:
                raise UsageError(f"edge {key} references a missing node")
        self.nodes = dict(sorted(nodes.items()))
        self.edges = dict(sorted(edges.items()))
        self.edit_log = tuple(edit_log)

    # -- views ---------------------------------------------------------------

    def node_ids(self) -> list[int]:
        return list(self.nodes)

    def edge_pairs(self) -> list[tuple[int, int]]:
        return list(self.edges)

    def __repr__(self) -> str:
        return f"FormGraph(nodes={len(self.nodes)}, edges={len(self.edges)}, edits={len(self.edit_log)})"

    # -- functional updates ----------------------------------------------------

    def with_scores(
        self,
        node_class_scores: Mapping[int, np.ndarray],
        edge_scores: Mapping[tuple[int, int], EdgeScores],
    ) -> "FormGraph":
        """Attach one stage's head outputs to every node and edge."""
        missing_nodes = set(self.nodes) - set(node_class_scores)
        missing_edges = set(self.edges) - set(edge_scores)
        if missing_nodes:
            raise UsageError(f"no class scores for nodes {sorted(missing_nodes)[:5]}")
        if missing_edges:
            raise UsageError(f"no edge scores for edges {sorted(missing_edges)[:5]}")
        nodes = {
            nid: replace(node, class_scores=_as_distribution(node_class_scores[nid]))
            for nid, node in self.nodes.items()
        }
        edges = {
            key: replace(edge, scores=edge_scores[key]) for key, edge in self.edges.items()
        }
        return FormGraph(nodes, edges, self.edit_log)

    def with_features(
        self,
        node_feats: Mapping[int, np.ndarray],
        edge_feats: Mapping[tuple[int, int], np.ndarray],
        node_initials: Mapping[int, np.ndarray] | None = None,
        edge_initials: Mapping[tuple[int, int], np.ndarray] | None = None,
    ) -> "FormGraph":
        """Replace working features (and optionally cached initials) everywhere."""
        if set(node_feats) != set(self.nodes) or set(edge_feats) != set(self.edges):
            raise UsageError("feature maps must cover exactly the graph's nodes and edges")
        nodes = {}
        for nid, node in self.nodes.items():
            init = node_initials[nid] if node_initials is not None else node.initial
            nodes[nid] = replace(node, feat=node_feats[nid], initial=init)
        edges = {}
        for key, edge in self.edges.items():
            init = edge_initials[key] if edge_initials is not None else edge.initial
            edges[key] = replace(edge, feat=edge_feats[key], initial=init)
        return FormGraph(nodes, edges, self.edit_log)


def _as_distribution(scores: np.ndarray | Sequence[float]) -> tuple[float, ...]:
    vec = np.asarray(scores, dtype=np.float64).reshape(-1)
    return tuple(float(v) for v in vec)


def init_graph(lines: Sequence[TextLine], pairs: Iterable[tuple[int, int]]) -> FormGraph:
    """Build the initial graph: one node per line, one edge per selected pair.

    Duplicate pairs collapse to one edge; a pair naming an unknown line id or
    pairing a line with itself is an error.
    """
    nodes = {
        ln.id: GraphNode(
            id=ln.id,
            line_ids=frozenset((ln.id,)),
            boxes=(ln.bbox,),
            class_scores=tuple(ln.class_scores),
        )
        for ln in lines
    }
    if len(nodes) != len(lines):
        raise UsageError("duplicate line ids in graph input")
    edges: dict[tuple[int, int], GraphEdge] = {}
    for a, b in pairs:
        if a == b:
            raise UsageError(f"line {a} paired with itself")
        if a not in nodes or b not in nodes:
            raise UsageError(f"edge ({a}, {b}) references an unknown line")
        key = (min(a, b), max(a, b))
        if key not in edges:
            edges[key] = GraphEdge(a=key[0], b=key[1])
    return FormGraph(nodes, edges)


# ---------------------------------------------------------------------------
# contraction machinery
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self, items: Iterable[int]):
        self.parent = {i: i for i in items}

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller id wins so component roots are deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _components_over_threshold(graph: FormGraph, field: str, threshold: float) -> list[tuple[int, ...]]:
    """Connected components of the subgraph whose `field` score clears `threshold`."""
    uf = _UnionFind(graph.nodes)
    for (a, b), edge in graph.edges.items():
        if edge.scores is None:
            raise UsageError(f"edge ({a}, {b}) has no scores; run a stage first")
        if getattr(edge.scores, field) >= threshold:
            uf.union(a, b)
    groups: dict[int, list[int]] = {}
    for nid in graph.nodes:
        groups.setdefault(uf.find(nid), []).append(nid)
    return [tuple(sorted(members)) for root, members in sorted(groups.items()) if len(members) > 1]


def _fuse_nodes(members: list[GraphNode], mode: str) -> GraphNode:
    new_id = min(node.id for node in members)
    line_ids = frozenset().union(*(node.line_ids for node in members))
    class_scores = tuple(
        float(v)
        for v in exact_mean_vectors([np.asarray(n.class_scores, dtype=np.float64) for n in members])
    )
    feats = [n.feat for n in members]
    feat = None
    if all(f is not None for f in feats):
        feat = exact_mean_vectors(feats)  # type: ignore[arg-type]
    all_boxes = [box for node in members for box in node.boxes]
    if mode == "merge":
        boxes: tuple[BBox, ...] = (union_bbox(all_boxes),)
    else:
        boxes = tuple(sorted(all_boxes))
    return GraphNode(
        id=new_id,
        line_ids=line_ids,
        boxes=boxes,
        class_scores=class_scores,
        feat=feat,
        initial=None,
    )


def _fuse_edges(bundle: list[GraphEdge], a: int, b: int, endpoints_changed: bool) -> GraphEdge:
    if len(bundle) == 1 and not endpoints_changed:
        return bundle[0]
    feats = [e.feat for e in bundle]
    feat = exact_mean_vectors(feats) if all(f is not None for f in feats) else None  # type: ignore[arg-type]
    scores = None
    if all(e.scores is not None for e in bundle):
        mean = exact_mean_vectors([np.asarray(e.scores, dtype=np.float64) for e in bundle])
        scores = EdgeScores.from_array(mean)
    return GraphEdge(a=a, b=b, feat=feat, initial=None, scores=scores)


def contract(graph: FormGraph, components: Sequence[Sequence[int]], mode: str, iteration: int) -> FormGraph:
    """Fuse each component into one node and rebuild the edge set.

    New node ids are the minimum member id. Self edges vanish; parallel edges
    average their features and scores coordinate-wise (order independent).
    Contracted nodes and edges with a moved endpoint lose their cached initial
    features, since their geometry changed.
    """
    if mode not in ("merge", "group"):
        raise UsageError(f"unknown contraction mode {mode!r}")
    seen: set[int] = set()
    for comp in components:
        if len(comp) < 2:
            raise UsageError(f"component {comp} has fewer than two nodes")
        for nid in comp:
            if nid not in graph.nodes:
                raise UsageError(f"component references missing node {nid}")
            if nid in seen:
                raise UsageError(f"node {nid} appears in two components")
            seen.add(nid)
    if not components:
        return graph

    target: dict[int, int] = {}
    for comp in components:
        new_id = min(comp)
        for nid in comp:
            target[nid] = new_id

    nodes: dict[int, GraphNode] = {}
    for nid, node in graph.nodes.items():
        if nid not in target:
            nodes[nid] = node
    for comp in components:
        members = [graph.nodes[nid] for nid in sorted(comp)]
        fused = _fuse_nodes(members, mode)
        nodes[fused.id] = fused

    bundles: dict[tuple[int, int], list[GraphEdge]] = {}
    moved: set[tuple[int, int]] = set()
    for (a, b), edge in graph.edges.items():
        na = target.get(a, a)
        nb = target.get(b, b)
        if na == nb:
            continue
        key = (min(na, nb), max(na, nb))
        bundles.setdefault(key, []).append(edge)
        if a in target or b in target:
            moved.add(key)
    edges = {
        key: _fuse_edges(bundle, key[0], key[1], endpoints_changed=key in moved)
        for key, bundle in bundles.items()
    }

    record = EditRecord(iteration=iteration, op=mode, targets=tuple(tuple(c) for c in sorted(tuple(sorted(c)) for c in components)))
    return FormGraph(nodes, edges, graph.edit_log + (record,))


def apply_edit_step(graph: FormGraph, thresholds: EditThresholds, iteration: int = 0) -> FormGraph:
    """One full edit: merge contraction, then group contraction, then pruning.

    Scores carried onto fused edges are the averages of their constituents,
    and every edge that cleared a contraction threshold ends up inside a
    component, so re-applying the same step is a no-op.
    """
    merged = contract(graph, _components_over_threshold(graph, "merge", thresholds.merge), "merge", iteration)
    grouped = contract(merged, _components_over_threshold(merged, "group", thresholds.group), "group", iteration)

    doomed = []
    for key, edge in grouped.edges.items():
        if edge.scores is None:
            raise UsageError(f"edge {key} has no scores; run a stage first")
        if edge.scores.prune >= thresholds.prune:
            doomed.append(key)
    if doomed:
        edges = {k: e for k, e in grouped.edges.items() if k not in set(doomed)}
        record = EditRecord(iteration=iteration, op="prune", targets=tuple(sorted(doomed)))
        return FormGraph(grouped.nodes, edges, grouped.edit_log + (record,))
    return grouped


def finalize(graph: FormGraph, threshold: float = RELATIONSHIP_THRESHOLD) -> FormGraph:
    """Read out the final graph: drop edges whose relationship score is below threshold."""
    doomed = []
    for key, edge in graph.edges.items():
        if edge.scores is None:
            raise UsageError(f"edge {key} has no scores; cannot finalize")
        if edge.scores.relationship < threshold:
            doomed.append(key)
    edges = {k: e for k, e in graph.edges.items() if k not in set(doomed)}
    log = graph.edit_log
    if doomed:
        log = log + (EditRecord(iteration=len(EDIT_THRESHOLDS) + 1, op="finalize", targets=tuple(sorted(doomed))),)
    return FormGraph(graph.nodes, edges, log)


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictedEntity:
    """Metrics-facing view of a final graph node."""

    node_id: int
    label: str
    boxes: tuple[BBox, ...]


def predicted_entities(graph: FormGraph, class_set: ClassSet) -> list[PredictedEntity]:
    """Nodes as labeled entities, in ascending node-id order.

    The label is the argmax of the node's class distribution; exact ties go to
    the earlier class index.
    """
    out = []
    for nid, node in graph.nodes.items():
        scores = node.class_scores
        if len(scores) != len(class_set):
            raise UsageError(f"node {nid} carries {len(scores)} class scores for {len(class_set)} classes")
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        out.append(PredictedEntity(node_id=nid, label=class_set.labels[best], boxes=node.boxes))
    return out


def predicted_relationships(graph: FormGraph) -> list[tuple[int, int]]:
    """Surviving edges as (node_id, node_id) pairs, ascending."""
    return list(graph.edges)


def graph_to_json(graph: FormGraph, class_set: ClassSet) -> dict:
    """Deterministic JSON view: entities with class and line boxes, relationships, edit log."""
    entities = []
    for ent, (nid, node) in zip(predicted_entities(graph, class_set), graph.nodes.items()):
        entities.append(
            {
                "id": nid,
                "label": ent.label,
                "class_scores": [float(s) for s in node.class_scores],
                "line_ids": sorted(node.line_ids),
                "lines": [list(box.as_tuple()) for box in node.boxes],
            }
        )
    relationships = []
    for (a, b), edge in graph.edges.items():
        rel: dict = {"a": a, "b": b}
        if edge.scores is not None:
            rel["score"] = edge.scores.relationship
        relationships.append(rel)
    return {
        "entities": entities,
        "relationships": relationships,
        "edit_log": [record.to_json() for record in graph.edit_log],
    }


def graph_from_json(obj: Mapping, class_set: ClassSet) -> tuple[list[PredictedEntity], list[tuple[int, int]]]:
    """Parse the JSON view back into the metrics-facing structures."""
    try:
        entities = [
            PredictedEntity(
                node_id=int(e["id"]),
                label=str(e["label"]),
                boxes=tuple(BBox(*[float(v) for v in box]) for box in e["lines"]),
            )
            for e in obj["entities"]
        ]
        relationships = [(int(r["a"]), int(r["b"])) for r in obj["relationships"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed graph JSON: {exc}") from exc
    for ent in entities:
        if ent.label not in class_set.labels:
            raise DataError(f"graph JSON uses unknown class {ent.label!r}")
        if not ent.boxes:
            raise DataError(f"entity {ent.node_id} has no line boxes")
    ids = {e.node_id for e in entities}
    for a, b in relationships:
        if a not in ids or b not in ids:
            raise DataError(f"relationship ({a}, {b}) references a missing entity")
    return entities, relationships
