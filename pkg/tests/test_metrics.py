"""Scoring protocols, checked by hand and against brute-force matchers."""

from __future__ import annotations

import numpy as np
import pytest

from formgraph.docmodel import Document, Entity, FUNSD_CLASSES, TextLine, synth_form
from formgraph.errors import UsageError
from formgraph.geometry import BBox
from formgraph.graphedit import PredictedEntity
from formgraph.metrics import (
    Counts,
    EvalReport,
    entity_matches,
    entity_verdicts,
    hit_at_1,
    per_document_average,
    precision_recall_f1,
    relationship_verdicts,
    score_entities,
    score_relationships,
)

from oracles import count_entities_bruteforce, count_relationships_bruteforce


def _line(i, box, label="other"):
    return TextLine(id=i, bbox=box, confidence=1.0,
                    class_scores=FUNSD_CLASSES.one_hot(label))


def _doc(gt_lines, gt_entities, gt_relationships=(), gt_links=()):
    return Document(
        name="m", image_width=1000, image_height=1000, class_set=FUNSD_CLASSES,
        lines=(), gt_lines=tuple(gt_lines), gt_entities=tuple(gt_entities),
        gt_relationships=frozenset(gt_relationships),
        gt_links_directed=tuple(gt_links),
    )


def _pred(i, label, *boxes):
    return PredictedEntity(node_id=i, label=label, boxes=tuple(boxes))


class TestPrecisionRecallF1:
    def test_empty_task_is_perfect(self):
        assert precision_recall_f1(Counts()) == (100.0, 100.0, 100.0)

    def test_mixed(self):
        p, r, f1 = precision_recall_f1(Counts(tp=1, fp=1, fn=0))
        assert (p, r) == (50.0, 100.0)
        assert f1 == pytest.approx(200.0 / 3.0)

    def test_nothing_predicted(self):
        p, r, f1 = precision_recall_f1(Counts(tp=0, fp=0, fn=3))
        assert (p, r, f1) == (0.0, 0.0, 0.0)

    def test_nothing_annotated(self):
        p, r, f1 = precision_recall_f1(Counts(tp=0, fp=2, fn=0))
        assert (p, r, f1) == (0.0, 0.0, 0.0)


class TestEntityMatching:
    def test_exact_single_line(self):
        doc = _doc([_line(0, BBox(0, 0, 10, 10), "question")],
                   [Entity(line_ids=(0,), label="question")])
        assert entity_matches(_pred(0, "question", BBox(0, 0, 10, 10)), doc.gt_entities[0], doc)

    def test_label_must_match(self):
        doc = _doc([_line(0, BBox(0, 0, 10, 10), "question")],
                   [Entity(line_ids=(0,), label="question")])
        assert not entity_matches(_pred(0, "answer", BBox(0, 0, 10, 10)), doc.gt_entities[0], doc)

    def test_iou_boundary_counts(self):
        doc = _doc([_line(0, BBox(0, 0, 10, 20), "other")],
                   [Entity(line_ids=(0,), label="other")])
        assert entity_matches(_pred(0, "other", BBox(0, 0, 10, 10)), doc.gt_entities[0], doc)
        assert not entity_matches(_pred(0, "other", BBox(0, 0, 10, 9.9)), doc.gt_entities[0], doc)

    def test_line_count_must_agree(self):
        doc = _doc(
            [_line(0, BBox(0, 0, 10, 10), "other"), _line(1, BBox(0, 20, 10, 30), "other")],
            [Entity(line_ids=(0, 1), label="other")],
        )
        assert not entity_matches(_pred(0, "other", BBox(0, 0, 10, 10)), doc.gt_entities[0], doc)
        assert not entity_matches(
            _pred(0, "other", BBox(0, 0, 10, 10), BBox(0, 20, 10, 30), BBox(50, 0, 60, 10)),
            doc.gt_entities[0], doc,
        )

    def test_matching_needs_augmenting_paths(self):
        # the ambiguous box overlaps both GT lines; the exact box only the
        # first; a greedy pairing in input order would dead-end
        g0, g1 = BBox(0, 0, 10, 10), BBox(0, 6, 10, 16)
        doc = _doc(
            [_line(0, g0, "other"), _line(1, g1, "other")],
            [Entity(line_ids=(0, 1), label="other")],
        )
        ambiguous = BBox(0, 3, 10, 13)
        exact = BBox(0, 0, 10, 10)
        assert entity_matches(_pred(0, "other", ambiguous, exact), doc.gt_entities[0], doc)
        assert entity_matches(_pred(0, "other", exact, ambiguous), doc.gt_entities[0], doc)


class TestEntityVerdicts:
    def _doc(self):
        return _doc(
            [_line(0, BBox(0, 0, 10, 10), "question"), _line(1, BBox(20, 0, 30, 10), "answer")],
            [Entity(line_ids=(0,), label="question"), Entity(line_ids=(1,), label="answer")],
        )

    def test_each_gt_matches_once(self):
        doc = self._doc()
        dup = _pred(0, "question", BBox(0, 0, 10, 10))
        flags, missed = entity_verdicts([dup, _pred(1, "question", BBox(0, 0, 10, 10))], doc)
        assert flags == [True, False]
        assert missed == [1]

    def test_counts(self):
        doc = self._doc()
        counts = score_entities([_pred(0, "question", BBox(0, 0, 10, 10))], doc)
        assert (counts.tp, counts.fp, counts.fn) == (1, 0, 1)


class TestRelationshipMatching:
    def _doc(self):
        # the answer entity has two lines; its first line anchors matching
        return _doc(
            [
                _line(0, BBox(0, 0, 10, 10), "question"),
                _line(1, BBox(20, 0, 30, 10), "answer"),
                _line(2, BBox(20, 14, 30, 24), "answer"),
            ],
            [Entity(line_ids=(0,), label="question"), Entity(line_ids=(1, 2), label="answer")],
            gt_relationships={(0, 1)},
        )

    def test_anchor_is_the_first_line(self):
        doc = self._doc()
        q = _pred(0, "question", BBox(0, 0, 10, 10))
        covers_first = _pred(1, "answer", BBox(20, 0, 30, 10))
        covers_second = _pred(2, "answer", BBox(20, 14, 30, 24))
        flags, missed = relationship_verdicts([q, covers_first], [(0, 1)], doc)
        assert flags == [True] and missed == []
        flags, missed = relationship_verdicts([q, covers_second], [(0, 2)], doc)
        assert flags == [False] and missed == [(0, 1)]

    def test_extra_pred_lines_are_harmless(self):
        doc = self._doc()
        q = _pred(0, "question", BBox(0, 0, 10, 10), BBox(500, 500, 600, 520))
        a = _pred(1, "answer", BBox(700, 0, 790, 10), BBox(20, 0, 30, 10))
        flags, _ = relationship_verdicts([q, a], [(0, 1)], doc)
        assert flags == [True]

    def test_either_orientation(self):
        doc = self._doc()
        q = _pred(3, "question", BBox(0, 0, 10, 10))
        a = _pred(7, "answer", BBox(20, 0, 30, 10))
        flags, _ = relationship_verdicts([a, q], [(7, 3)], doc)
        assert flags == [True]

    def test_greedy_consumes_gt(self):
        doc = self._doc()
        q = _pred(0, "question", BBox(0, 0, 10, 10))
        a = _pred(1, "answer", BBox(20, 0, 30, 10))
        counts = score_relationships([q, a], [(0, 1), (0, 1)], doc)
        assert (counts.tp, counts.fp, counts.fn) == (1, 1, 0)

    def test_unknown_node_id_rejected(self):
        doc = self._doc()
        with pytest.raises(UsageError):
            relationship_verdicts([_pred(0, "question", BBox(0, 0, 10, 10))], [(0, 9)], doc)


class TestHitAt1:
    def _doc(self, links, n=3):
        lines = [_line(i, BBox(0, 30 * i, 10, 30 * i + 10), "question") for i in range(n)]
        ents = [Entity(line_ids=(i,), label="question") for i in range(n)]
        rels = {(min(p, c), max(p, c)) for p, c in links}
        return _doc(lines, ents, rels, links)

    def test_no_links_no_queries(self):
        doc = self._doc([])
        assert hit_at_1(doc, {}) == (0, 0)

    def test_highest_score_wins(self):
        doc = self._doc([(0, 2)])
        assert hit_at_1(doc, {(0, 2): 0.9, (1, 2): 0.3}) == (1, 1)
        assert hit_at_1(doc, {(0, 2): 0.2, (1, 2): 0.8}) == (0, 1)

    def test_missing_scores_default_to_zero_and_ties_go_low(self):
        doc = self._doc([(0, 2)])
        assert hit_at_1(doc, {}) == (1, 1)        # tie at 0.0, entity 0 wins
        doc = self._doc([(1, 2)])
        assert hit_at_1(doc, {}) == (0, 1)

    def test_any_annotated_parent_counts(self):
        doc = self._doc([(0, 3), (1, 3)], n=4)
        assert hit_at_1(doc, {(1, 3): 0.9}) == (1, 1)
        assert hit_at_1(doc, {(2, 3): 0.9}) == (0, 1)

    def test_child_is_not_its_own_candidate(self):
        doc = self._doc([(0, 1)], n=2)
        # only entity 0 remains as candidate, score irrelevant
        assert hit_at_1(doc, {}) == (1, 1)

    def test_queries_are_distinct_children(self):
        doc = self._doc([(0, 2), (1, 2), (0, 1)])
        hits, queries = hit_at_1(doc, {(0, 1): 1.0, (0, 2): 1.0})
        assert queries == 2
        assert hits == 2


class TestAgainstBruteForce:
    def _perturbed(self, doc, rng):
        """GT-derived predictions with random edits; returns (preds, pairs)."""
        gt_map = doc.gt_line_by_id()
        keep = [i for i in range(len(doc.gt_entities)) if rng.random() > 0.15]
        position = {ent: pos for pos, ent in enumerate(keep)}
        preds = []
        for ent_idx in keep:
            ent = doc.gt_entities[ent_idx]
            label = ent.label
            boxes = [gt_map[lid].bbox for lid in ent.line_ids]
            roll = rng.random()
            if roll < 0.2:
                label = FUNSD_CLASSES.labels[int(rng.integers(len(FUNSD_CLASSES)))]
            elif roll < 0.4:
                b = boxes[0]
                boxes[0] = BBox(b.x1, b.y1 + 2, b.x2, b.y2 + 2)   # small, survives
            elif roll < 0.6:
                b = boxes[0]
                boxes[0] = BBox(b.x1, b.y1 + 25, b.x2, b.y2 + 25)  # big, fails
            preds.append(PredictedEntity(node_id=len(preds), label=label, boxes=tuple(boxes)))
        pairs = [
            (position[a], position[b])
            for a, b in sorted(doc.gt_relationships)
            if a in position and b in position and rng.random() > 0.2
        ]
        if len(preds) >= 2 and rng.random() < 0.4:
            pairs.append((0, len(preds) - 1))
        return preds, pairs

    def test_fuzz(self, rng):
        for draw in range(60):
            doc = synth_form(seed=500 + draw, rows=2, cols=2,
                             multiline_prob=0.5)
            preds, pairs = self._perturbed(doc, rng)

            counts = score_entities(preds, doc)
            oracle_preds = [(p.label, [b.as_tuple() for b in p.boxes]) for p in preds]
            oracle_gts = [(e.label, list(e.line_ids)) for e in doc.gt_entities]
            gt_boxes = {lid: ln.bbox.as_tuple() for lid, ln in doc.gt_line_by_id().items()}
            want = count_entities_bruteforce(oracle_preds, oracle_gts, gt_boxes)
            assert (counts.tp, counts.fp, counts.fn) == want

            rcounts = score_relationships(preds, pairs, doc)
            rwant = count_relationships_bruteforce(
                oracle_preds, pairs, oracle_gts, sorted(doc.gt_relationships), gt_boxes
            )
            assert (rcounts.tp, rcounts.fp, rcounts.fn) == rwant


class TestReports:
    def _simple_doc(self):
        return _doc(
            [_line(0, BBox(0, 0, 10, 10), "question"), _line(1, BBox(20, 0, 30, 10), "answer")],
            [Entity(line_ids=(0,), label="question"), Entity(line_ids=(1,), label="answer")],
            gt_relationships={(0, 1)}, gt_links=((0, 1),),
        )

    def test_accumulation(self):
        doc = self._simple_doc()
        preds = [_pred(0, "question", BBox(0, 0, 10, 10)), _pred(1, "answer", BBox(20, 0, 30, 10))]
        report = EvalReport()
        report.add_document(doc, preds, [(0, 1)], pair_scores={(0, 1): 0.9})
        report.add_document(doc, preds, [], pair_scores={})
        assert report.documents == 2
        assert (report.entity.tp, report.entity.fp, report.entity.fn) == (4, 0, 0)
        assert (report.relationship.tp, report.relationship.fn) == (1, 1)
        assert report.hit1_queries == 2 and report.hit1_hits == 2  # empty scores tie to parent 0
        assert report.hit1_percent == 100.0

    def test_hit1_absent_without_queries(self):
        report = EvalReport()
        assert report.hit1_percent is None
        assert "hit_at_1" not in report.to_json()

    def test_json_and_table(self):
        doc = self._simple_doc()
        preds = [_pred(0, "question", BBox(0, 0, 10, 10))]
        report = EvalReport()
        report.add_document(doc, preds, [], pair_scores={(0, 1): 1.0})
        obj = report.to_json()
        assert obj["entity"]["tp"] == 1 and obj["entity"]["fn"] == 1
        assert obj["relationship"]["fn"] == 1
        assert obj["hit_at_1"]["queries"] == 1
        table = report.format_table()
        assert "entities" in table and "relationships" in table and "hit@1" in table

    def test_per_document_average(self):
        doc = self._simple_doc()
        good = EvalReport()
        good.add_document(doc, [
            _pred(0, "question", BBox(0, 0, 10, 10)), _pred(1, "answer", BBox(20, 0, 30, 10)),
        ], [(0, 1)])
        bad = EvalReport()
        bad.add_document(doc, [], [])
        out = per_document_average([good, bad])
        assert out["documents"] == 2
        assert out["entity"]["f1"] == pytest.approx(50.0)
        with pytest.raises(UsageError):
            per_document_average([])
