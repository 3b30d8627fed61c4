"""Training supervision: GT alignment, label derivation, losses, and the pair trainer.

Detected lines rarely coincide with annotated lines, so labels are derived:
each detected line is assigned to the ground-truth line it covers best, and
edge/node targets follow from how those assignments relate through entities
and relationships.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .constants import ALIGNMENT_IOU_THRESHOLD
from .docmodel import Document, TextLine, confident_lines
from .errors import UsageError
from .geometry import clipped_iou
from .graphedit import EdgeScores, FormGraph
from .numerics import sigmoid
from .proposal import (
    PairFeatureBuilder,
    ProposalWeights,
    pair_logits,
    proposal_feature_dim,
    proposal_loss_and_grad,
)

log = logging.getLogger(__name__)

EDGE_LABELS = ("prune", "merge", "group", "relationship")


def assign_lines(
    pred_lines: Sequence[TextLine],
    gt_lines: Sequence[TextLine],
    threshold: float = ALIGNMENT_IOU_THRESHOLD,
) -> dict[int, int | None]:
    """Assign each predicted line to its best GT line by clipped IOU.

    A prediction stays unassigned (None) when no GT line reaches the
    threshold. Score ties go to the smaller GT id.
    """
    ordered_gt = sorted(gt_lines, key=lambda ln: ln.id)
    out: dict[int, int | None] = {}
    for pred in pred_lines:
        best_id: int | None = None
        best_score = -1.0
        for gt in ordered_gt:
            score = clipped_iou(gt.bbox, pred.bbox)
            # strict improvement keeps the smallest GT id among exact ties
            if score >= threshold and score > best_score:
                best_score = score
                best_id = gt.id
        out[pred.id] = best_id
    return out


@dataclass(frozen=True)
class GraphLabels:
    """Derived targets for one graph: a class per node (None = ignore) and an
    edge verdict per edge."""

    node_labels: dict[int, str | None]
    edge_labels: dict[tuple[int, int], str]


def derive_labels(
    graph: FormGraph,
    assignment: Mapping[int, int | None],
    doc: Document,
) -> GraphLabels:
    """Derive per-node class targets and per-edge verdicts from GT alignment.

    Edge rules, first match wins:
      merge          all assigned lines on both endpoints cover one GT line
      group          they cover several GT lines of one entity
      relationship   each endpoint sits inside one entity and the two
                     entities are linked
      prune          everything else (including any unassigned endpoint)

    A node's class target is its entity's class when all its lines land in
    exactly one entity; otherwise the node is ignored by the class loss.
    """
    owner = doc.entity_of_gt_line()

    def gt_lines_of(node_id: int) -> set[int] | None:
        hits: set[int] = set()
        for lid in sorted(graph.nodes[node_id].line_ids):
            if lid not in assignment:
                raise UsageError(f"line {lid} missing from assignment")
            gt = assignment[lid]
            if gt is None:
                return None
            hits.add(gt)
        return hits

    coverage = {nid: gt_lines_of(nid) for nid in graph.nodes}

    node_labels: dict[int, str | None] = {}
    for nid in graph.nodes:
        hit = coverage[nid]
        label: str | None = None
        if hit:
            entities = {owner[g] for g in hit if g in owner}
            if len(entities) == 1 and all(g in owner for g in hit):
                label = doc.gt_entities[next(iter(entities))].label
        node_labels[nid] = label

    edge_labels: dict[tuple[int, int], str] = {}
    for (a, b) in graph.edges:
        ga, gb = coverage[a], coverage[b]
        if not ga or not gb:
            edge_labels[(a, b)] = "prune"
            continue
        combined = ga | gb
        owners = {owner[g] for g in combined if g in owner}
        fully_owned = all(g in owner for g in combined)
        if len(combined) == 1:
            verdict = "merge"
        elif fully_owned and len(owners) == 1:
            verdict = "group"
        else:
            verdict = "prune"
            ents_a = {owner[g] for g in ga if g in owner}
            ents_b = {owner[g] for g in gb if g in owner}
            if (
                fully_owned
                and len(ents_a) == 1
                and len(ents_b) == 1
                and ents_a != ents_b
            ):
                ea, eb = next(iter(ents_a)), next(iter(ents_b))
                if (min(ea, eb), max(ea, eb)) in doc.gt_relationships:
                    verdict = "relationship"
        edge_labels[(a, b)] = verdict
    return GraphLabels(node_labels=node_labels, edge_labels=edge_labels)


def oracle_scores(
    graph: FormGraph,
    assignment: Mapping[int, int | None],
    doc: Document,
) -> tuple[dict[int, np.ndarray], dict[tuple[int, int], EdgeScores], GraphLabels]:
    """Perfect stage outputs implied by the derived labels.

    Nodes get a one-hot of their target class (ignored nodes keep their
    current distribution); edges get 1.0 on their verdict field and 0.0
    elsewhere. Running the pipeline on these scores reproduces the ground
    truth, which makes them a handy end-to-end oracle.
    """
    labels = derive_labels(graph, assignment, doc)
    node_scores: dict[int, np.ndarray] = {}
    for nid, label in labels.node_labels.items():
        if label is None:
            node_scores[nid] = np.asarray(graph.nodes[nid].class_scores, dtype=np.float64)
        else:
            node_scores[nid] = np.asarray(doc.class_set.one_hot(label), dtype=np.float64)
    edge_scores = {
        key: EdgeScores(**{field: 1.0 if field == verdict else 0.0 for field in EDGE_LABELS})
        for key, verdict in labels.edge_labels.items()
    }
    return node_scores, edge_scores, labels


def proposal_labels(
    doc: Document,
    lines: Sequence[TextLine] | None = None,
    assignment: Mapping[int, int | None] | None = None,
) -> dict[tuple[int, int], bool]:
    """Positive/negative target for every unordered pair of confident lines.

    A pair is positive when an edge between the two lines would be labeled
    merge, group, or relationship; all ties to unassigned lines are negative.
    """
    lines = tuple(lines) if lines is not None else confident_lines(doc)
    if assignment is None:
        assignment = assign_lines(lines, doc.gt_lines)
    owner = doc.entity_of_gt_line()
    ordered = sorted(lines, key=lambda ln: ln.id)
    out: dict[tuple[int, int], bool] = {}
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            a, b = ordered[i].id, ordered[j].id
            ga, gb = assignment.get(a), assignment.get(b)
            positive = False
            if ga is not None and gb is not None:
                if ga == gb:
                    positive = True
                elif ga in owner and gb in owner:
                    ea, eb = owner[ga], owner[gb]
                    if ea == eb:
                        positive = True
                    elif (min(ea, eb), max(ea, eb)) in doc.gt_relationships:
                        positive = True
            out[(a, b)] = positive
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy over already-sigmoided scores.

    Scores at exactly 0 or 1 would produce infinities; they are clamped to
    1e-7 away from the boundary with a warning, since they indicate a
    saturated or miscalibrated scorer.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} differ")
    if scores.size == 0:
        raise UsageError("empty loss batch")
    if np.any((scores < 0.0) | (scores > 1.0)):
        raise UsageError("scores outside [0, 1]")
    eps = 1e-7
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        log.warning("clamping %d saturated scores away from {0, 1}", int(np.sum((scores <= 0.0) | (scores >= 1.0))))
    clipped = np.clip(scores, eps, 1.0 - eps)
    terms = -(labels * np.log(clipped) + (1.0 - labels) * np.log(1.0 - clipped))
    return float(terms.mean())


def node_class_bce(scores: np.ndarray, label_indices: Sequence[int | None]) -> float:
    """Per-class BCE over node class distributions, multi-label form.

    Rows whose target is None are excluded entirely.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if scores.shape[0] != len(label_indices):
        raise UsageError("one label per score row required")
    keep = [i for i, lab in enumerate(label_indices) if lab is not None]
    if not keep:
        raise UsageError("all rows ignored; nothing to score")
    kept = scores[keep]
    targets = np.zeros_like(kept)
    for row, i in enumerate(keep):
        targets[row, label_indices[i]] = 1.0
    return bce_loss(kept.reshape(-1), targets.reshape(-1))


# ---------------------------------------------------------------------------
# proposal trainer
# ---------------------------------------------------------------------------

def _doc_training_arrays(doc: Document) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    builder = PairFeatureBuilder(doc)
    pairs, x_ab, x_ba = builder.pair_matrix()
    if not pairs:
        return None
    labels = proposal_labels(doc, builder.lines)
    y = np.array([1.0 if labels[p] else 0.0 for p in pairs], dtype=np.float64)
    return x_ab, x_ba, y


def train_proposal_mlp(
    docs: Sequence[Document],
    steps: int = 400,
    lr: float = 0.5,
    momentum: float = 0.9,
    hidden: int = 256,
    seed: int = 0,
) -> tuple[ProposalWeights, list[float]]:
    """Fit the pair scorer on derived labels with momentum SGD.

    Each step takes one full-batch gradient on one document, cycling through
    the corpus. Deterministic for a given seed and document list. Returns the
    trained weights (float64) and the per-step loss curve.
    """
    if not docs:
        raise UsageError("no documents to train on")
    if steps < 0:
        raise UsageError("steps must be non-negative")
    if lr <= 0.0:
        raise UsageError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise UsageError("momentum must lie in [0, 1)")

    class_count = len(docs[0].class_set)
    batches = []
    for doc in docs:
        if len(doc.class_set) != class_count:
            raise UsageError("documents mix class sets")
        arrays = _doc_training_arrays(doc)
        if arrays is not None:
            batches.append(arrays)
    if not batches:
        raise UsageError("no document yields a trainable pair")

    feat = proposal_feature_dim(class_count)
    rng = np.random.default_rng(seed)
    weights = ProposalWeights(
        w1=rng.standard_normal((hidden, feat)) * np.sqrt(2.0 / feat),
        b1=np.zeros(hidden),
        w2=rng.standard_normal((1, hidden)) * np.sqrt(1.0 / hidden),
        b2=np.zeros(1),
    )
    velocity = {k: np.zeros_like(getattr(weights, k)) for k in ("w1", "b1", "w2", "b2")}
    curve: list[float] = []
    for step in range(steps):
        x_ab, x_ba, y = batches[step % len(batches)]
        loss, grads = proposal_loss_and_grad(weights, x_ab, x_ba, y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step}")
        curve.append(loss)
        updated = {}
        for key in velocity:
            velocity[key] = momentum * velocity[key] - lr * grads[key]
            updated[key] = getattr(weights, key) + velocity[key]
        weights = ProposalWeights(**updated)
    return weights, curve


def pair_accuracy(
    weights: ProposalWeights,
    docs: Sequence[Document],
) -> tuple[float, int]:
    """Fraction of pair labels the scorer gets right at a 0.5 cutoff, and the pair count."""
    correct = 0
    total = 0
    for doc in docs:
        arrays = _doc_training_arrays(doc)
        if arrays is None:
            continue
        x_ab, x_ba, y = arrays
        scores = sigmoid(pair_logits(weights, x_ab, x_ba))
        predicted = scores >= 0.5
        correct += int(np.sum(predicted == (y > 0.5)))
        total += y.size
    if total == 0:
        raise UsageError("no pairs to evaluate")
    return correct / total, total
