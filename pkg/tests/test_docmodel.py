"""Document model, loaders, and the synthetic generator."""

from __future__ import annotations

import json
import math

import pytest

from formgraph.docmodel import (
    ClassSet,
    Document,
    Entity,
    FUNSD_CLASSES,
    NAF_CLASSES,
    TextLine,
    confident_lines,
    document_from_json,
    document_to_json,
    dumps_deterministic,
    group_words_into_lines,
    load_document,
    load_funsd,
    load_naf,
    save_document,
    synth_form,
)
from formgraph.constants import NAF_SCALE
from formgraph.errors import DataError, UsageError
from formgraph.geometry import BBox


class TestClassSet:
    def test_one_hot(self):
        assert FUNSD_CLASSES.one_hot("question") == (0.0, 1.0, 0.0, 0.0)
        assert len(NAF_CLASSES) == 2

    def test_unknown_label(self):
        with pytest.raises(DataError):
            FUNSD_CLASSES.index("footnote")

    def test_duplicates_rejected(self):
        with pytest.raises(UsageError):
            ClassSet(("a", "a"))


class TestTextLine:
    def test_score_sum_enforced(self):
        with pytest.raises(UsageError):
            TextLine(id=0, bbox=BBox(0, 0, 1, 1), confidence=1.0, class_scores=(0.5, 0.2, 0.0, 0.0))

    def test_confidence_range(self):
        with pytest.raises(UsageError):
            TextLine(id=0, bbox=BBox(0, 0, 1, 1), confidence=1.5, class_scores=(1.0, 0.0, 0.0, 0.0))

    def test_negative_score(self):
        with pytest.raises(UsageError):
            TextLine(id=0, bbox=BBox(0, 0, 1, 1), confidence=1.0, class_scores=(1.5, -0.5, 0.0, 0.0))


class TestDocumentValidation:
    def _line(self, i, y=0.0):
        return TextLine(id=i, bbox=BBox(0, y, 10, y + 5), confidence=1.0,
                        class_scores=FUNSD_CLASSES.one_hot("other"))

    def test_entity_must_reference_known_lines(self):
        with pytest.raises(DataError):
            Document(
                name="d", image_width=100, image_height=100, class_set=FUNSD_CLASSES,
                lines=(), gt_lines=(self._line(0),),
                gt_entities=(Entity(line_ids=(7,), label="other"),),
            )

    def test_relationship_bounds(self):
        with pytest.raises(DataError):
            Document(
                name="d", image_width=100, image_height=100, class_set=FUNSD_CLASSES,
                lines=(), gt_lines=(self._line(0),),
                gt_entities=(Entity(line_ids=(0,), label="other"),),
                gt_relationships=frozenset({(0, 3)}),
            )

    def test_confidence_filter(self):
        low = TextLine(id=0, bbox=BBox(0, 0, 10, 5), confidence=0.4,
                       class_scores=FUNSD_CLASSES.one_hot("other"))
        ok = TextLine(id=1, bbox=BBox(0, 10, 10, 15), confidence=0.5,
                      class_scores=FUNSD_CLASSES.one_hot("other"))
        doc = Document(name="d", image_width=100, image_height=100,
                       class_set=FUNSD_CLASSES, lines=(low, ok))
        # the boundary value itself survives
        assert [ln.id for ln in confident_lines(doc)] == [1]


class TestSynth:
    def test_same_seed_same_bytes(self, tmp_path):
        kwargs = dict(rows=3, cols=2, multiline_prob=0.4, overseg_prob=0.3, jitter=0.2)
        a = synth_form(seed=7, **kwargs)
        b = synth_form(seed=7, **kwargs)
        assert dumps_deterministic(document_to_json(a)) == dumps_deterministic(document_to_json(b))
        save_document(a, tmp_path / "a.json")
        save_document(b, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_different_seed_differs(self):
        a = synth_form(seed=1)
        b = synth_form(seed=2)
        assert document_to_json(a) != document_to_json(b)

    def test_grid_size(self):
        doc = synth_form(seed=0, rows=3, cols=2)
        assert len(doc.gt_entities) == 12  # question + answer per cell
        assert len(doc.gt_relationships) == 6

    def test_full_oversegmentation_doubles_lines(self):
        doc = synth_form(seed=5, rows=2, cols=2, overseg_prob=1.0)
        assert len(doc.lines) == 2 * len(doc.gt_lines)

    def test_no_oversegmentation_copies_gt(self):
        doc = synth_form(seed=5, rows=2, cols=2)
        assert len(doc.lines) == len(doc.gt_lines)
        for pred, gt in zip(doc.lines, doc.gt_lines):
            assert pred.bbox == gt.bbox
            assert pred.class_scores == gt.class_scores

    def test_multiline_answers(self):
        doc = synth_form(seed=5, rows=2, cols=2, multiline_prob=1.0)
        answers = [e for e in doc.gt_entities if e.label == "answer"]
        assert all(len(e.line_ids) == 2 for e in answers)

    def test_jitter_keeps_distribution(self):
        doc = synth_form(seed=5, rows=2, cols=2, jitter=0.8)
        for ln in doc.lines:
            assert math.fsum(ln.class_scores) == pytest.approx(1.0, abs=1e-9)
            # the true class still dominates the noise
            gt = doc.gt_lines[0]
            assert max(ln.class_scores) > 1.0 / len(FUNSD_CLASSES)
        del gt

    def test_split_fragments_union_to_gt(self):
        doc = synth_form(seed=9, rows=1, cols=1, overseg_prob=1.0)
        gt = doc.gt_lines[0]
        frags = [ln for ln in doc.lines if ln.text and ln.text.startswith(gt.text or "")]
        assert len(frags) == 2
        assert frags[0].bbox.x1 == gt.bbox.x1
        assert frags[1].bbox.x2 == gt.bbox.x2
        assert frags[0].bbox.x2 < frags[1].bbox.x1  # abutting with a gap

    def test_bad_params(self):
        with pytest.raises(UsageError):
            synth_form(seed=0, rows=0)
        with pytest.raises(UsageError):
            synth_form(seed=0, overseg_prob=1.5)

    def test_roundtrip(self, tmp_path):
        doc = synth_form(seed=11, rows=2, cols=1, multiline_prob=0.5, overseg_prob=0.5)
        save_document(doc, tmp_path / "doc.json")
        loaded = load_document(tmp_path / "doc.json")
        assert document_to_json(loaded) == document_to_json(doc)


class TestWordGrouping:
    def test_single_row(self):
        words = [("world", BBox(60, 0, 100, 10)), ("hello", BBox(0, 0, 50, 10))]
        lines = group_words_into_lines(words, "question", FUNSD_CLASSES)
        assert len(lines) == 1
        assert lines[0].text == "hello world"
        assert lines[0].bbox == BBox(0, 0, 100, 10)

    def test_two_rows(self):
        words = [
            ("a", BBox(0, 0, 10, 10)),
            ("b", BBox(12, 1, 20, 11)),   # overlaps row 1 by 9 of 10
            ("c", BBox(0, 20, 10, 30)),   # clearly below
        ]
        lines = group_words_into_lines(words, "answer", FUNSD_CLASSES, start_id=5)
        assert [ln.text for ln in lines] == ["a b", "c"]
        assert [ln.id for ln in lines] == [5, 6]

    def test_half_height_rule(self):
        base = ("a", BBox(0, 0, 10, 10))
        barely = ("b", BBox(12, 5, 20, 15))      # overlap 5 == half of 10
        toolow = ("c", BBox(24, 6, 30, 16))      # overlap 4 with a < half
        lines = group_words_into_lines([base, barely, toolow], "other", FUNSD_CLASSES)
        texts = {ln.text for ln in lines}
        # b joins a; c chains through b (overlap 9 with b), one connected row
        assert texts == {"a b c"}

    def test_empty(self):
        assert group_words_into_lines([], "other", FUNSD_CLASSES) == []


class TestFunsdLoader:
    def _write(self, tmp_path, form):
        path = tmp_path / "doc.json"
        path.write_text(json.dumps({"form": form}), encoding="utf-8")
        return path

    def test_basic_document(self, tmp_path):
        form = [
            {
                "id": 0, "label": "question",
                "words": [{"text": "Name", "box": [10, 10, 60, 25]}],
                "linking": [[0, 1]],
            },
            {
                "id": 1, "label": "answer",
                "words": [
                    {"text": "Jane", "box": [70, 10, 110, 25]},
                    {"text": "Doe", "box": [115, 10, 150, 25]},
                ],
                "linking": [[0, 1]],
            },
        ]
        doc = load_funsd(self._write(tmp_path, form))
        assert len(doc.gt_entities) == 2
        assert doc.gt_entities[1].label == "answer"
        assert len(doc.gt_lines) == 2  # answer words share one row
        assert doc.gt_lines[1].text == "Jane Doe"
        assert doc.gt_relationships == frozenset({(0, 1)})
        # duplicate link listed on both entities collapses to one directed copy
        assert doc.gt_links_directed == ((0, 1),)
        assert doc.lines == doc.gt_lines

    def test_multirow_entity(self, tmp_path):
        form = [
            {
                "id": 0, "label": "answer",
                "words": [
                    {"text": "first", "box": [0, 0, 40, 10]},
                    {"text": "second", "box": [0, 20, 50, 30]},
                ],
                "linking": [],
            }
        ]
        doc = load_funsd(self._write(tmp_path, form))
        assert len(doc.gt_entities) == 1
        assert doc.gt_entities[0].line_ids == (0, 1)

    def test_label_case_folded(self, tmp_path):
        form = [{"id": 0, "label": "QUESTION", "words": [{"text": "x", "box": [0, 0, 5, 5]}], "linking": []}]
        doc = load_funsd(self._write(tmp_path, form))
        assert doc.gt_entities[0].label == "question"

    def test_unknown_label_rejected(self, tmp_path):
        form = [{"id": 0, "label": "banner", "words": [{"text": "x", "box": [0, 0, 5, 5]}], "linking": []}]
        with pytest.raises(DataError):
            load_funsd(self._write(tmp_path, form))

    def test_dangling_link_rejected(self, tmp_path):
        form = [{"id": 0, "label": "other", "words": [{"text": "x", "box": [0, 0, 5, 5]}], "linking": [[0, 9]]}]
        with pytest.raises(DataError):
            load_funsd(self._write(tmp_path, form))

    def test_empty_entity_dropped_with_links(self, tmp_path, caplog):
        form = [
            {"id": 0, "label": "question", "words": [{"text": "x", "box": [0, 0, 5, 5]}], "linking": [[0, 1]]},
            {"id": 1, "label": "answer", "words": [], "linking": []},
        ]
        with caplog.at_level("WARNING"):
            doc = load_funsd(self._write(tmp_path, form))
        assert len(doc.gt_entities) == 1
        assert doc.gt_relationships == frozenset()

    def test_explicit_image_size(self, tmp_path):
        form = [{"id": 0, "label": "other", "words": [{"text": "x", "box": [0, 0, 5, 5]}], "linking": []}]
        doc = load_funsd(self._write(tmp_path, form), image_size=(800, 1000))
        assert (doc.image_width, doc.image_height) == (800, 1000)

    def test_missing_form_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{}", encoding="utf-8")
        with pytest.raises(DataError):
            load_funsd(path)


class TestNafLoader:
    def _write(self, tmp_path, obj):
        path = tmp_path / "naf.json"
        path.write_text(json.dumps(obj), encoding="utf-8")
        return path

    def test_basic(self, tmp_path):
        obj = {
            "textBBs": [{"id": "t0", "poly_points": [[0, 0], [100, 0], [100, 50], [0, 50]], "type": "text"}],
            "fieldBBs": [{"id": "f0", "poly_points": [[120, 0], [200, 0], [200, 50], [120, 50]], "type": "blank"}],
            "pairs": [["t0", "f0"]],
            "samePairs": [],
        }
        doc = load_naf(self._write(tmp_path, obj))
        assert [e.label for e in doc.gt_entities] == ["preprinted", "input"]
        assert doc.gt_relationships == frozenset({(0, 1)})
        # polygons reduce to boxes at the working scale
        assert doc.gt_lines[0].bbox == BBox(0, 0, 100 * NAF_SCALE, 50 * NAF_SCALE)

    def test_table_boxes_dropped_and_pairs_ignored(self, tmp_path, caplog):
        obj = {
            "textBBs": [{"id": "t0", "poly_points": [[0, 0], [10, 0], [10, 5], [0, 5]], "type": "text"}],
            "fieldBBs": [
                {"id": "f0", "poly_points": [[20, 0], [30, 0], [30, 5], [20, 5]], "type": "fieldRow"},
            ],
            "pairs": [["t0", "f0"]],
            "samePairs": [],
        }
        with caplog.at_level("WARNING"):
            doc = load_naf(self._write(tmp_path, obj))
        assert len(doc.gt_entities) == 1
        assert doc.gt_relationships == frozenset()
        assert "table box" in caplog.text

    def test_same_pairs_count(self, tmp_path):
        obj = {
            "textBBs": [
                {"id": "t0", "poly_points": [[0, 0], [10, 0], [10, 5], [0, 5]], "type": "text"},
                {"id": "t1", "poly_points": [[0, 10], [10, 10], [10, 15], [0, 15]], "type": "text"},
            ],
            "fieldBBs": [],
            "pairs": [],
            "samePairs": [["t0", "t1"]],
        }
        doc = load_naf(self._write(tmp_path, obj))
        assert doc.gt_relationships == frozenset({(0, 1)})

    def test_unknown_pair_id_rejected(self, tmp_path):
        obj = {
            "textBBs": [{"id": "t0", "poly_points": [[0, 0], [10, 0], [10, 5], [0, 5]], "type": "text"}],
            "fieldBBs": [],
            "pairs": [["t0", "ghost"]],
            "samePairs": [],
        }
        with pytest.raises(DataError):
            load_naf(self._write(tmp_path, obj))

    def test_image_size_scaled(self, tmp_path):
        obj = {
            "imageWidth": 1000, "imageHeight": 2000,
            "textBBs": [{"id": "t0", "poly_points": [[0, 0], [10, 0], [10, 5], [0, 5]], "type": "text"}],
            "fieldBBs": [], "pairs": [], "samePairs": [],
        }
        doc = load_naf(self._write(tmp_path, obj))
        assert (doc.image_width, doc.image_height) == (1000 * NAF_SCALE, 2000 * NAF_SCALE)


def test_document_json_rejects_garbage():
    with pytest.raises(DataError):
        document_from_json({"name": "x"})
