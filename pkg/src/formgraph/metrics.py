"""Evaluation protocols: entity detection, relationship detection, retrieval hit rate.

An entity counts only when it is exactly right: correct class, a perfect
one-to-one cover of the GT entity's lines at IOU >= 0.5, and no line left
over on either side. Relationship scoring is looser and anchors on each GT
entity's first line. Counts accumulate micro-style across a corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .constants import EVAL_IOU_THRESHOLD
from .docmodel import Document, Entity
from .errors import UsageError
from .geometry import BBox, iou
from .graphedit import PredictedEntity


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn


def precision_recall_f1(counts: Counts) -> tuple[float, float, float]:
    """P/R/F1 as percentages. Empty denominators score 0, except that a
    completely empty task (nothing predicted, nothing annotated) is perfect."""
    if counts.tp == counts.fp == counts.fn == 0:
        return 100.0, 100.0, 100.0
    p = 100.0 * counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = 100.0 * counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


# ---------------------------------------------------------------------------
# entity matching
# ---------------------------------------------------------------------------

def _perfect_line_cover(pred_boxes: Sequence[BBox], gt_boxes: Sequence[BBox]) -> bool:
    """True when a one-to-one matching pairs every line on both sides at IOU >= 0.5."""
    if len(pred_boxes) != len(gt_boxes):
        return False
    n = len(pred_boxes)
    adjacency = [
        [j for j in range(n) if iou(pred_boxes[i], gt_boxes[j]) >= EVAL_IOU_THRESHOLD]
        for i in range(n)
    ]
    match_of_gt: list[int | None] = [None] * n

    def augment(i: int, visited: list[bool]) -> bool:
        for j in adjacency[i]:
            if visited[j]:
                continue
            visited[j] = True
            if match_of_gt[j] is None or augment(match_of_gt[j], visited):
                match_of_gt[j] = i
                return True
        return False

    matched = 0
    for i in range(n):
        if augment(i, [False] * n):
            matched += 1
    return matched == n


def entity_matches(pred: PredictedEntity, gt: Entity, doc: Document) -> bool:
    """Exact-entity criterion: equal class and a perfect line cover."""
    if pred.label != gt.label:
        return False
    gt_map = doc.gt_line_by_id()
    gt_boxes = [gt_map[lid].bbox for lid in gt.line_ids]
    return _perfect_line_cover(list(pred.boxes), gt_boxes)


def entity_verdicts(preds: Sequence[PredictedEntity], doc: Document) -> tuple[list[bool], list[int]]:
    """Greedy one-to-one matching in input order against GT entities in id order.

    Returns a hit flag per prediction and the indices of GT entities nothing
    matched.
    """
    unmatched = list(range(len(doc.gt_entities)))
    flags: list[bool] = []
    for pred in preds:
        hit = None
        for idx in unmatched:
            if entity_matches(pred, doc.gt_entities[idx], doc):
                hit = idx
                break
        flags.append(hit is not None)
        if hit is not None:
            unmatched.remove(hit)
    return flags, unmatched


def score_entities(preds: Sequence[PredictedEntity], doc: Document) -> Counts:
    flags, missed = entity_verdicts(preds, doc)
    return Counts(tp=sum(flags), fp=len(flags) - sum(flags), fn=len(missed))


# ---------------------------------------------------------------------------
# relationship matching
# ---------------------------------------------------------------------------

def _entity_side_matches(pred: PredictedEntity, gt: Entity, doc: Document) -> bool:
    """Relationship-side criterion: class equal and some predicted line covers
    the GT entity's first line at IOU >= 0.5."""
    if pred.label != gt.label:
        return False
    first = doc.gt_line_by_id()[gt.line_ids[0]].bbox
    return any(iou(box, first) >= EVAL_IOU_THRESHOLD for box in pred.boxes)


def relationship_verdicts(
    preds: Sequence[PredictedEntity],
    pred_pairs: Sequence[tuple[int, int]],
    doc: Document,
) -> tuple[list[bool], list[tuple[int, int]]]:
    """Greedy one-to-one matching of predicted pairs against GT relationships.

    pred_pairs index into `preds` by node id; a predicted pair matches a GT
    relationship in either orientation. Returns a hit flag per predicted pair
    and the GT relationships nothing matched.
    """
    by_id = {p.node_id: p for p in preds}
    for a, b in pred_pairs:
        if a not in by_id or b not in by_id:
            raise UsageError(f"relationship ({a}, {b}) references a missing predicted entity")
    unmatched = sorted(doc.gt_relationships)
    flags: list[bool] = []
    for a, b in pred_pairs:
        hit = None
        pa, pb = by_id[a], by_id[b]
        for pair in unmatched:
            ga, gb = doc.gt_entities[pair[0]], doc.gt_entities[pair[1]]
            forward = _entity_side_matches(pa, ga, doc) and _entity_side_matches(pb, gb, doc)
            backward = _entity_side_matches(pa, gb, doc) and _entity_side_matches(pb, ga, doc)
            if forward or backward:
                hit = pair
                break
        flags.append(hit is not None)
        if hit is not None:
            unmatched.remove(hit)
    return flags, unmatched


def score_relationships(
    preds: Sequence[PredictedEntity],
    pred_pairs: Sequence[tuple[int, int]],
    doc: Document,
) -> Counts:
    flags, missed = relationship_verdicts(preds, pred_pairs, doc)
    return Counts(tp=sum(flags), fp=len(flags) - sum(flags), fn=len(missed))


# ---------------------------------------------------------------------------
# parent retrieval
# ---------------------------------------------------------------------------

def hit_at_1(
    doc: Document,
    pair_scores: Mapping[tuple[int, int], float],
) -> tuple[int, int]:
    """(hits, queries) for parent retrieval over GT entities.

    Every distinct child in the directed GT links is one query. The candidate
    with the highest relationship score wins (missing pairs score 0, ties go
    to the lower entity id); the query is a hit when the winner is one of the
    child's annotated parents.
    """
    if not doc.gt_links_directed:
        return (0, 0)
    parents: dict[int, set[int]] = {}
    for parent, child in doc.gt_links_directed:
        parents.setdefault(child, set()).add(parent)
    hits = 0
    for child in sorted(parents):
        candidates = [e for e in range(len(doc.gt_entities)) if e != child]
        if not candidates:
            continue
        best = max(
            candidates,
            key=lambda e: (pair_scores.get((min(e, child), max(e, child)), 0.0), -e),
        )
        if best in parents[child]:
            hits += 1
    return hits, len(parents)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Micro-accumulated corpus scores."""

    entity: Counts = field(default_factory=Counts)
    relationship: Counts = field(default_factory=Counts)
    hit1_hits: int = 0
    hit1_queries: int = 0
    documents: int = 0

    def add_document(
        self,
        doc: Document,
        preds: Sequence[PredictedEntity],
        pred_pairs: Sequence[tuple[int, int]],
        pair_scores: Mapping[tuple[int, int], float] | None = None,
    ) -> None:
        self.entity.add(score_entities(preds, doc))
        self.relationship.add(score_relationships(preds, pred_pairs, doc))
        if pair_scores is not None:
            h, q = hit_at_1(doc, pair_scores)
            self.hit1_hits += h
            self.hit1_queries += q
        self.documents += 1

    @property
    def hit1_percent(self) -> float | None:
        if self.hit1_queries == 0:
            return None
        return 100.0 * self.hit1_hits / self.hit1_queries

    def to_json(self) -> dict:
        ep, er, ef = precision_recall_f1(self.entity)
        rp, rr, rf = precision_recall_f1(self.relationship)
        out = {
            "documents": self.documents,
            "entity": {
                "tp": self.entity.tp, "fp": self.entity.fp, "fn": self.entity.fn,
                "precision": ep, "recall": er, "f1": ef,
            },
            "relationship": {
                "tp": self.relationship.tp, "fp": self.relationship.fp, "fn": self.relationship.fn,
                "precision": rp, "recall": rr, "f1": rf,
            },
        }
        if self.hit1_queries:
            out["hit_at_1"] = {
                "hits": self.hit1_hits,
                "queries": self.hit1_queries,
                "percent": self.hit1_percent,
            }
        return out

    def format_table(self) -> str:
        ep, er, ef = precision_recall_f1(self.entity)
        rp, rr, rf = precision_recall_f1(self.relationship)
        rows = [
            ("task", "prec", "rec", "f1"),
            ("entities", f"{ep:.2f}", f"{er:.2f}", f"{ef:.2f}"),
            ("relationships", f"{rp:.2f}", f"{rr:.2f}", f"{rf:.2f}"),
        ]
        if self.hit1_queries:
            rows.append(("hit@1", f"{self.hit1_percent:.2f}", "", ""))
        widths = [max(len(row[i]) for row in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
        return "\n".join(lines)


def per_document_average(reports: Sequence[EvalReport]) -> dict:
    """Mean of per-document P/R/F1, the alternative aggregation some baselines use.

    Each document contributes equally regardless of how many entities it has;
    the matchers are the same ones micro accumulation uses.
    """
    if not reports:
        raise UsageError("no per-document reports to average")
    out: dict = {"documents": len(reports)}
    for task in ("entity", "relationship"):
        triples = [
            precision_recall_f1(getattr(rep, task)) for rep in reports
        ]
        n = len(triples)
        out[task] = {
            "precision": sum(t[0] for t in triples) / n,
            "recall": sum(t[1] for t in triples) / n,
            "f1": sum(t[2] for t in triples) / n,
        }
    return out
