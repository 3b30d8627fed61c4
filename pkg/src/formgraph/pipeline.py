"""End-to-end inference: proposal, three stage/edit rounds, final readout.

The oracle mode replaces every learned scorer with scores implied by the
derived labels. It exercises the identical graph machinery and is the
reference path for end-to-end checks: on clean inputs it must reproduce the
ground truth exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constants import EDIT_THRESHOLDS, PROPOSAL_EDGE_CAP, RELATIONSHIP_THRESHOLD, EditThresholds
from .docmodel import Document, confident_lines
from .errors import UsageError
from .features import Provider, init_graph_features, reintroduce_features, stub_provider
from .gnn import gcn_stage_forward
from .graphedit import (
    EdgeScores,
    EditRecord,
    FormGraph,
    apply_edit_step,
    contract,
    finalize,
    init_graph,
    predicted_entities,
    predicted_relationships,
)
from .metrics import EvalReport
from .proposal import EdgeCandidate, score_pairs, select_edges
from .supervision import assign_lines, oracle_scores, proposal_labels
from .weights import ModelWeights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceResult:
    """Everything a caller might want from one document pass.

    `scored` is the graph after the last edit step but before the
    relationship filter, so its edges still carry scores for retrieval
    protocols; `final` is the filtered readout.
    """

    final: FormGraph
    scored: FormGraph
    candidates: tuple[EdgeCandidate, ...]
    selected: tuple[tuple[int, int], ...]

    def entity_pair_scores(self, doc: Document) -> dict[tuple[int, int], float]:
        """Relationship scores keyed by GT entity index pairs.

        Defined only for graphs whose every node covers exactly one GT
        entity's lines (the forced-grouping protocol guarantees this).
        """
        owner = doc.entity_of_gt_line()
        entity_of_node: dict[int, int] = {}
        for nid, node in self.scored.nodes.items():
            owners = {owner.get(lid) for lid in node.line_ids}
            if len(owners) != 1 or None in owners:
                raise UsageError(f"node {nid} does not coincide with one GT entity")
            entity_of_node[nid] = owners.pop()
        scores: dict[tuple[int, int], float] = {}
        for (a, b), edge in self.scored.edges.items():
            if edge.scores is None:
                continue
            ea, eb = entity_of_node[a], entity_of_node[b]
            if ea == eb:
                continue
            key = (min(ea, eb), max(ea, eb))
            scores[key] = max(scores.get(key, 0.0), edge.scores.relationship)
        return scores


def _stage_scores_from_model(graph: FormGraph, stage):
    node_ids = graph.node_ids()
    index_of = {nid: i for i, nid in enumerate(node_ids)}
    node_feats = np.stack([graph.nodes[nid].feat for nid in node_ids])
    pairs = graph.edge_pairs()
    edge_feats = (
        np.stack([graph.edges[p].feat for p in pairs])
        if pairs
        else np.zeros((0, node_feats.shape[1]), dtype=node_feats.dtype)
    )
    positional = [(index_of[a], index_of[b]) for a, b in pairs]
    result = gcn_stage_forward(stage, node_feats, positional, edge_feats)

    node_scores = {nid: result.node_class_scores[i] for i, nid in enumerate(node_ids)}
    edge_scores = {
        pair: EdgeScores.from_array(result.edge_scores[i]) for i, pair in enumerate(pairs)
    }
    node_updates = {nid: result.node_feats[i] for i, nid in enumerate(node_ids)}
    edge_updates = {pair: result.edge_feats[i] for i, pair in enumerate(pairs)}
    return node_scores, edge_scores, node_updates, edge_updates


def _forced_entity_components(graph: FormGraph, doc: Document) -> list[tuple[int, ...]]:
    """Node groups that realize the GT entity partition (for retrieval protocols)."""
    owner = doc.entity_of_gt_line()
    groups: dict[int, list[int]] = {}
    for nid, node in graph.nodes.items():
        owners = {owner.get(lid) for lid in node.line_ids}
        if len(owners) != 1 or None in owners:
            raise UsageError(f"node {nid} spans several GT entities; cannot force grouping")
        groups.setdefault(owners.pop(), []).append(nid)
    return [tuple(sorted(v)) for k, v in sorted(groups.items()) if len(v) > 1]


def run_document(
    doc: Document,
    weights: ModelWeights | None = None,
    provider: Provider = stub_provider,
    thresholds: Sequence[EditThresholds] = EDIT_THRESHOLDS,
    relationship_threshold: float = RELATIONSHIP_THRESHOLD,
    oracle: bool = False,
    forced_entities: bool = False,
) -> InferenceResult:
    """Run the full pipeline on one document.

    oracle=True swaps every learned score for label-derived scores (weights
    may then be omitted). forced_entities=True runs the retrieval protocol:
    the graph is built over GT lines, the first edit step contracts nodes
    into their GT entities, and later steps may only prune.
    """
    if not oracle and weights is None:
        raise UsageError("weights are required unless oracle scoring is enabled")
    if len(thresholds) != len(EDIT_THRESHOLDS):
        raise UsageError(f"expected {len(EDIT_THRESHOLDS)} threshold triples")

    lines = tuple(doc.gt_lines) if forced_entities else confident_lines(doc)
    if not lines:
        empty = FormGraph({}, {})
        return InferenceResult(final=empty, scored=empty, candidates=(), selected=())
    assignment = assign_lines(lines, doc.gt_lines)

    if oracle:
        labels = proposal_labels(doc, lines, assignment)
        candidates = [
            EdgeCandidate(a, b, 1.0 if labels[(a, b)] else 0.0) for (a, b) in sorted(labels)
        ]
        positives = sum(1 for c in candidates if c.score >= 0.5)
        if positives > PROPOSAL_EDGE_CAP:
            log.warning("%s: %d positive pairs exceed the proposal cap", doc.name, positives)
    else:
        candidates = score_pairs(doc, weights.proposal(), lines)
    selected = select_edges(candidates)

    graph = init_graph(lines, selected)
    if not oracle:
        graph = init_graph_features(graph, doc, provider, weights)

    for iteration in range(1, len(EDIT_THRESHOLDS) + 1):
        if not oracle and iteration > 1:
            graph = reintroduce_features(graph, doc, provider, weights.stage(iteration))

        if oracle:
            node_scores, edge_scores, _ = oracle_scores(graph, assignment, doc)
            graph = graph.with_scores(node_scores, edge_scores)
        else:
            node_scores, edge_scores, node_feats, edge_feats = _stage_scores_from_model(
                graph, weights.stage(iteration)
            )
            graph = graph.with_features(node_feats, edge_feats).with_scores(node_scores, edge_scores)

        if forced_entities:
            if iteration == 1:
                components = _forced_entity_components(graph, doc)
                graph = contract(graph, components, "group", iteration)
            # merges and further grouping stay forbidden; pruning proceeds
            doomed = [
                key for key, edge in graph.edges.items()
                if edge.scores is not None and edge.scores.prune >= thresholds[iteration - 1].prune
            ]
            if doomed:
                edges = {k: e for k, e in graph.edges.items() if k not in set(doomed)}
                record = EditRecord(iteration=iteration, op="prune", targets=tuple(sorted(doomed)))
                graph = FormGraph(graph.nodes, edges, graph.edit_log + (record,))
        else:
            graph = apply_edit_step(graph, thresholds[iteration - 1], iteration)

    scored = graph
    final = finalize(graph, relationship_threshold)
    return InferenceResult(
        final=final,
        scored=scored,
        candidates=tuple(candidates),
        selected=tuple(selected),
    )


def evaluate_documents(
    docs: Sequence[Document],
    weights: ModelWeights | None = None,
    provider: Provider = stub_provider,
    oracle: bool = False,
    with_hit1: bool = False,
    thresholds: Sequence[EditThresholds] = EDIT_THRESHOLDS,
    relationship_threshold: float = RELATIONSHIP_THRESHOLD,
) -> EvalReport:
    """Run the pipeline over a corpus and score it against its own ground truth."""
    report = EvalReport()
    for doc in docs:
        result = run_document(
            doc,
            weights=weights,
            provider=provider,
            oracle=oracle,
            thresholds=thresholds,
            relationship_threshold=relationship_threshold,
        )
        preds = predicted_entities(result.final, doc.class_set)
        pairs = predicted_relationships(result.final)
        pair_scores = None
        if with_hit1:
            retrieval = run_document(
                doc,
                weights=weights,
                provider=provider,
                oracle=oracle,
                thresholds=thresholds,
                relationship_threshold=relationship_threshold,
                forced_entities=True,
            )
            pair_scores = retrieval.entity_pair_scores(doc)
        report.add_document(doc, preds, pairs, pair_scores)
    return report
