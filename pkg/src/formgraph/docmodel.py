"""Document model: text lines, entities, relationship annotations, and loaders.

A Document carries two parallel views of one page: the detected input lines the
pipeline operates on, and the ground-truth lines/entities/links used for label
derivation and evaluation. Synthetic documents populate both views from the
same layout so they stay consistent by construction.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .constants import DETECTION_CONFIDENCE_THRESHOLD, NAF_SCALE
from .errors import DataError, UsageError
from .geometry import BBox, union_bbox

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# class sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSet:
    """Ordered semantic label vocabulary for a dataset."""

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.labels:
            raise UsageError("class set must contain at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise UsageError(f"duplicate labels in class set: {self.labels}")

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"unknown class label {label!r}; expected one of {self.labels}") from None

    def one_hot(self, label: str) -> tuple[float, ...]:
        i = self.index(label)
        return tuple(1.0 if j == i else 0.0 for j in range(len(self.labels)))


FUNSD_CLASSES = ClassSet(("header", "question", "answer", "other"))
NAF_CLASSES = ClassSet(("preprinted", "input"))

_CLASS_SETS = {"funsd": FUNSD_CLASSES, "naf": NAF_CLASSES}


def class_set_by_name(name: str) -> ClassSet:
    try:
        return _CLASS_SETS[name]
    except KeyError:
        raise UsageError(f"unknown class set {name!r}; expected one of {sorted(_CLASS_SETS)}") from None


# ---------------------------------------------------------------------------
# annotation records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextLine:
    """One text line, either detected or ground truth.

    class_scores is a distribution over the document's class set; detected
    lines carry recognizer scores, ground-truth lines carry a one-hot vector.
    """

    id: int
    bbox: BBox
    confidence: float
    class_scores: tuple[float, ...]
    text: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise UsageError(f"line {self.id}: confidence {self.confidence} outside [0, 1]")
        if any(s < 0.0 for s in self.class_scores):
            raise UsageError(f"line {self.id}: negative class score")
        total = math.fsum(self.class_scores)
        if abs(total - 1.0) > 1e-6:
            raise UsageError(f"line {self.id}: class scores sum to {total}, expected 1")


@dataclass(frozen=True)
class Entity:
    """A ground-truth text entity: one or more GT lines sharing a class."""

    line_ids: tuple[int, ...]
    label: str

    def __post_init__(self) -> None:
        if not self.line_ids:
            raise UsageError("entity with no lines")
        if len(set(self.line_ids)) != len(self.line_ids):
            raise UsageError(f"entity repeats line ids: {self.line_ids}")


@dataclass(frozen=True)
class Document:
    """One annotated page.

    gt_relationships holds undirected entity-index pairs stored as (low, high).
    gt_links_directed preserves annotation direction as (parent, child) entity
    indices where the source provides one; it may be empty.
    """

    name: str
    image_width: float
    image_height: float
    class_set: ClassSet
    lines: tuple[TextLine, ...]
    gt_lines: tuple[TextLine, ...] = ()
    gt_entities: tuple[Entity, ...] = ()
    gt_relationships: frozenset[tuple[int, int]] = frozenset()
    gt_links_directed: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.image_width <= 0 or self.image_height <= 0:
            raise UsageError(f"{self.name}: non-positive image size")
        for group in (self.lines, self.gt_lines):
            ids = [ln.id for ln in group]
            if len(set(ids)) != len(ids):
                raise DataError(f"{self.name}: duplicate line ids")
        c = len(self.class_set)
        for ln in self.lines + self.gt_lines:
            if len(ln.class_scores) != c:
                raise DataError(f"{self.name}: line {ln.id} has {len(ln.class_scores)} class scores, expected {c}")
        gt_ids = {ln.id for ln in self.gt_lines}
        for ent in self.gt_entities:
            if ent.label not in self.class_set.labels:
                raise DataError(f"{self.name}: entity label {ent.label!r} not in class set")
            for lid in ent.line_ids:
                if lid not in gt_ids:
                    raise DataError(f"{self.name}: entity references unknown GT line {lid}")
        n_ent = len(self.gt_entities)
        for a, b in self.gt_relationships:
            if not (0 <= a < n_ent and 0 <= b < n_ent):
                raise DataError(f"{self.name}: relationship ({a}, {b}) indexes a missing entity")
            if a >= b:
                raise DataError(f"{self.name}: relationship ({a}, {b}) is not stored as (low, high)")
        for p, ch in self.gt_links_directed:
            if not (0 <= p < n_ent and 0 <= ch < n_ent) or p == ch:
                raise DataError(f"{self.name}: directed link ({p}, {ch}) is invalid")

    def line_by_id(self) -> dict[int, TextLine]:
        return {ln.id: ln for ln in self.lines}

    def gt_line_by_id(self) -> dict[int, TextLine]:
        return {ln.id: ln for ln in self.gt_lines}

    def entity_of_gt_line(self) -> dict[int, int]:
        """Map each GT line id to the index of the entity that owns it."""
        owner: dict[int, int] = {}
        for idx, ent in enumerate(self.gt_entities):
            for lid in ent.line_ids:
                owner.setdefault(lid, idx)
        return owner


def confident_lines(doc: Document) -> tuple[TextLine, ...]:
    """Detected lines that survive the fixed confidence filter."""
    return tuple(ln for ln in doc.lines if ln.confidence >= DETECTION_CONFIDENCE_THRESHOLD)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _line_to_json(ln: TextLine) -> dict:
    out: dict = {
        "id": ln.id,
        "box": list(ln.bbox.as_tuple()),
        "confidence": ln.confidence,
        "class_scores": list(ln.class_scores),
    }
    if ln.text is not None:
        out["text"] = ln.text
    return out


def _line_from_json(obj: Mapping) -> TextLine:
    return TextLine(
        id=int(obj["id"]),
        bbox=BBox(*obj["box"]),
        confidence=float(obj["confidence"]),
        class_scores=tuple(float(s) for s in obj["class_scores"]),
        text=obj.get("text"),
    )


def document_to_json(doc: Document) -> dict:
    return {
        "name": doc.name,
        "image_width": doc.image_width,
        "image_height": doc.image_height,
        "classes": list(doc.class_set.labels),
        "lines": [_line_to_json(ln) for ln in doc.lines],
        "gt_lines": [_line_to_json(ln) for ln in doc.gt_lines],
        "gt_entities": [{"lines": list(e.line_ids), "label": e.label} for e in doc.gt_entities],
        "gt_relationships": sorted(list(pair) for pair in doc.gt_relationships),
        "gt_links_directed": [list(pair) for pair in doc.gt_links_directed],
    }


def document_from_json(obj: Mapping) -> Document:
    try:
        return Document(
            name=str(obj["name"]),
            image_width=float(obj["image_width"]),
            image_height=float(obj["image_height"]),
            class_set=ClassSet(tuple(obj["classes"])),
            lines=tuple(_line_from_json(o) for o in obj["lines"]),
            gt_lines=tuple(_line_from_json(o) for o in obj.get("gt_lines", ())),
            gt_entities=tuple(
                Entity(line_ids=tuple(int(i) for i in o["lines"]), label=str(o["label"]))
                for o in obj.get("gt_entities", ())
            ),
            gt_relationships=frozenset(
                (int(a), int(b)) for a, b in obj.get("gt_relationships", ())
            ),
            gt_links_directed=tuple(
                (int(a), int(b)) for a, b in obj.get("gt_links_directed", ())
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed document JSON: {exc}") from exc


def save_document(doc: Document, path: str | Path) -> None:
    Path(path).write_text(dumps_deterministic(document_to_json(doc)), encoding="utf-8")


def load_document(path: str | Path) -> Document:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read document {path}: {exc}") from exc
    return document_from_json(obj)


def dumps_deterministic(obj) -> str:
    """JSON text with sorted keys and fixed separators, same bytes every run."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# word-to-line grouping (used by the FUNSD loader, exposed for reuse)
# ---------------------------------------------------------------------------

def group_words_into_lines(
    words: Sequence[tuple[str, BBox]],
    label: str,
    class_set: ClassSet,
    start_id: int = 0,
) -> list[TextLine]:
    """Cluster word boxes into text lines for one entity.

    Two words share a line when their vertical overlap is at least half the
    smaller word height; lines are emitted top-to-bottom and words inside a
    line left-to-right, joined by single spaces.
    """
    if not words:
        return []
    n = len(words)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            bi, bj = words[i][1], words[j][1]
            overlap = min(bi.y2, bj.y2) - max(bi.y1, bj.y1)
            smaller = min(bi.height, bj.height)
            if smaller <= 0:
                same_row = overlap >= 0
            else:
                same_row = overlap >= 0.5 * smaller
            if same_row:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri

    rows: dict[int, list[int]] = {}
    for i in range(n):
        rows.setdefault(find(i), []).append(i)

    ordered_rows = sorted(
        rows.values(),
        key=lambda idxs: (min(words[i][1].y1 for i in idxs), min(words[i][1].x1 for i in idxs)),
    )
    one_hot = class_set.one_hot(label)
    lines: list[TextLine] = []
    for offset, idxs in enumerate(ordered_rows):
        idxs.sort(key=lambda i: (words[i][1].x1, words[i][1].y1))
        text = " ".join(words[i][0] for i in idxs)
        box = union_bbox([words[i][1] for i in idxs])
        lines.append(
            TextLine(
                id=start_id + offset,
                bbox=box,
                confidence=1.0,
                class_scores=one_hot,
                text=text,
            )
        )
    return lines


# ---------------------------------------------------------------------------
# FUNSD loader
# ---------------------------------------------------------------------------

def load_funsd(path: str | Path, image_size: tuple[float, float] | None = None) -> Document:
    """Load one FUNSD annotation file into a Document.

    The annotation stores word boxes grouped into labeled entities plus
    undirected links between entity ids. Entity word boxes are regrouped into
    text lines; the same lines serve as both input and ground truth since the
    dataset ships no detector output. Annotation files carry no image size, so
    unless `image_size` is given the page extent is taken from the boxes plus
    a margin.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if "form" not in raw or not isinstance(raw["form"], list):
        raise DataError(f"{path}: missing 'form' array")

    gt_lines: list[TextLine] = []
    entities: list[Entity] = []
    src_index_of_entity: dict[int, int] = {}
    raw_links: list[tuple[int, int]] = []
    seen_src_ids: set[int] = set()

    for item in raw["form"]:
        try:
            src_id = int(item["id"])
            label = str(item["label"]).lower()
            words = [
                (str(w["text"]), BBox(*[float(v) for v in w["box"]]))
                for w in item["words"]
            ]
            links = [(int(a), int(b)) for a, b in item.get("linking", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed form item: {exc}") from exc
        seen_src_ids.add(src_id)
        if label not in FUNSD_CLASSES.labels:
            raise DataError(f"{path}: entity {src_id} has unknown label {label!r}")
        if not words:
            log.warning("%s: entity %d has no words, dropped", path.name, src_id)
            continue
        lines = group_words_into_lines(words, label, FUNSD_CLASSES, start_id=len(gt_lines))
        gt_lines.extend(lines)
        src_index_of_entity[src_id] = len(entities)
        entities.append(Entity(line_ids=tuple(ln.id for ln in lines), label=label))
        raw_links.extend(links)

    relationships: set[tuple[int, int]] = set()
    directed: list[tuple[int, int]] = []
    seen_directed: set[tuple[int, int]] = set()
    for a, b in raw_links:
        for src in (a, b):
            if src not in seen_src_ids:
                raise DataError(f"{path}: linking references unknown entity id {src}")
        if a == b:
            raise DataError(f"{path}: entity {a} linked to itself")
        if a not in src_index_of_entity or b not in src_index_of_entity:
            log.warning("%s: link (%d, %d) touches a dropped empty entity, ignored", path.name, a, b)
            continue
        ia, ib = src_index_of_entity[a], src_index_of_entity[b]
        relationships.add((min(ia, ib), max(ia, ib)))
        # FUNSD lists each link once per endpoint; keep one directed copy,
        # first-seen orientation wins and is treated as (parent, child).
        if (ia, ib) not in seen_directed and (ib, ia) not in seen_directed:
            seen_directed.add((ia, ib))
            directed.append((ia, ib))

    if image_size is not None:
        width, height = image_size
    else:
        width, height = _extent_with_margin(gt_lines)

    return Document(
        name=path.stem,
        image_width=width,
        image_height=height,
        class_set=FUNSD_CLASSES,
        lines=gt_lines,
        gt_lines=gt_lines,
        gt_entities=tuple(entities),
        gt_relationships=frozenset(relationships),
        gt_links_directed=tuple(directed),
    )


def _extent_with_margin(lines: Sequence[TextLine], margin: float = 20.0) -> tuple[float, float]:
    if not lines:
        return (1.0, 1.0)
    box = union_bbox([ln.bbox for ln in lines])
    return (box.x2 + margin, box.y2 + margin)


# ---------------------------------------------------------------------------
# NAF loader
# ---------------------------------------------------------------------------

_NAF_TABLE_TYPES = frozenset({"fieldRow", "fieldCol", "fieldRegion"})


def load_naf(path: str | Path, image_size: tuple[float, float] | None = None) -> Document:
    """Load one NAF annotation file into a Document.

    Text boxes become `preprinted` lines, field boxes become `input` lines;
    table-structure boxes (rows, columns, regions) are dropped. Both `pairs`
    and `samePairs` contribute undirected relationships; pairs touching a
    dropped table box are ignored with a warning, pairs naming an id that does
    not exist at all are an error. Polygons arrive at full scan resolution and
    are reduced to boxes at the pipeline's working scale.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    gt_lines: list[TextLine] = []
    entities: list[Entity] = []
    entity_of_src: dict[str, int] = {}
    dropped: set[str] = set()

    for key, label in (("textBBs", "preprinted"), ("fieldBBs", "input")):
        for item in raw.get(key, []):
            try:
                src_id = str(item["id"])
                poly = [(float(x), float(y)) for x, y in item["poly_points"]]
                box_type = str(item.get("type", ""))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed {key} entry: {exc}") from exc
            if src_id in entity_of_src or src_id in dropped:
                raise DataError(f"{path}: duplicate box id {src_id!r}")
            if box_type in _NAF_TABLE_TYPES:
                dropped.add(src_id)
                continue
            if not poly:
                raise DataError(f"{path}: box {src_id!r} has no polygon points")
            xs = [p[0] for p in poly]
            ys = [p[1] for p in poly]
            box = BBox(min(xs), min(ys), max(xs), max(ys)).scaled(NAF_SCALE)
            line = TextLine(
                id=len(gt_lines),
                bbox=box,
                confidence=1.0,
                class_scores=NAF_CLASSES.one_hot(label),
            )
            gt_lines.append(line)
            entity_of_src[src_id] = len(entities)
            entities.append(Entity(line_ids=(line.id,), label=label))

    relationships: set[tuple[int, int]] = set()
    for key in ("pairs", "samePairs"):
        for pair in raw.get(key, []):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise DataError(f"{path}: malformed pair entry {pair!r} in {key}")
            a, b = str(pair[0]), str(pair[1])
            if a in dropped or b in dropped:
                log.warning("%s: pair (%s, %s) touches a table box, ignored", path.name, a, b)
                continue
            if a not in entity_of_src or b not in entity_of_src:
                raise DataError(f"{path}: pair ({a!r}, {b!r}) references an unknown box id")
            if a == b:
                raise DataError(f"{path}: box {a!r} paired with itself")
            ia, ib = entity_of_src[a], entity_of_src[b]
            relationships.add((min(ia, ib), max(ia, ib)))

    if image_size is not None:
        width, height = image_size
    elif "imageWidth" in raw and "imageHeight" in raw:
        width = float(raw["imageWidth"]) * NAF_SCALE
        height = float(raw["imageHeight"]) * NAF_SCALE
    else:
        width, height = _extent_with_margin(gt_lines)

    return Document(
        name=path.stem,
        image_width=width,
        image_height=height,
        class_set=NAF_CLASSES,
        lines=gt_lines,
        gt_lines=gt_lines,
        gt_entities=tuple(entities),
        gt_relationships=frozenset(relationships),
        gt_links_directed=(),
    )


# ---------------------------------------------------------------------------
# synthetic forms
# ---------------------------------------------------------------------------

def synth_form(
    seed: int,
    rows: int = 4,
    cols: int = 2,
    multiline_prob: float = 0.0,
    overseg_prob: float = 0.0,
    jitter: float = 0.0,
    name: str | None = None,
) -> Document:
    """Generate a deterministic question/answer form.

    The page is a grid of cells; each cell holds a single-line question entity
    and an answer entity to its right, linked by one relationship. With
    `multiline_prob` the answer grows a second line below its first. The
    detected-line view copies the ground truth, except that `overseg_prob`
    splits an input line into two abutting fragments (ground truth unchanged)
    and `jitter` mixes uniform noise into the detected class scores. The same
    seed and parameters reproduce the same document bit for bit.
    """
    if rows < 1 or cols < 1:
        raise UsageError(f"grid must be at least 1x1, got {rows}x{cols}")
    for pname, p in (("multiline_prob", multiline_prob), ("overseg_prob", overseg_prob), ("jitter", jitter)):
        if not 0.0 <= p <= 1.0:
            raise UsageError(f"{pname} must lie in [0, 1], got {p}")

    rng = np.random.default_rng(seed)
    margin = 60.0
    cell_w, cell_h = 520.0, 120.0
    line_h = 20.0
    width = 2 * margin + cols * cell_w
    height = 2 * margin + rows * cell_h

    gt_lines: list[TextLine] = []
    entities: list[Entity] = []
    relationships: set[tuple[int, int]] = set()
    directed: list[tuple[int, int]] = []

    def add_gt(box: BBox, label: str, text: str) -> int:
        line = TextLine(
            id=len(gt_lines),
            bbox=box,
            confidence=1.0,
            class_scores=FUNSD_CLASSES.one_hot(label),
            text=text,
        )
        gt_lines.append(line)
        return line.id

    for r in range(rows):
        for c in range(cols):
            ox = margin + c * cell_w
            oy = margin + r * cell_h
            q_w = float(rng.uniform(100.0, 180.0))
            gap = float(rng.uniform(20.0, 40.0))
            a_w = float(rng.uniform(120.0, 200.0))
            q_box = BBox(ox, oy, ox + q_w, oy + line_h)
            a_x = ox + q_w + gap
            a_box = BBox(a_x, oy, a_x + a_w, oy + line_h)

            q_line = add_gt(q_box, "question", f"Q{r}.{c}")
            q_idx = len(entities)
            entities.append(Entity(line_ids=(q_line,), label="question"))

            a_line_ids = [add_gt(a_box, "answer", f"A{r}.{c}")]
            second_w = float(rng.uniform(100.0, a_w))
            if float(rng.random()) < multiline_prob:
                a2_box = BBox(a_x, oy + line_h + 8.0, a_x + second_w, oy + 2 * line_h + 8.0)
                a_line_ids.append(add_gt(a2_box, "answer", f"A{r}.{c}b"))
            a_idx = len(entities)
            entities.append(Entity(line_ids=tuple(a_line_ids), label="answer"))

            relationships.add((q_idx, a_idx))
            directed.append((q_idx, a_idx))

    pred_lines: list[TextLine] = []
    for gt in gt_lines:
        scores = np.asarray(gt.class_scores, dtype=np.float64)
        noise = rng.uniform(0.0, 1.0, size=scores.shape)
        split_draw = float(rng.random())
        split_at = float(rng.uniform(0.4, 0.6))
        if jitter > 0.0:
            mixed = scores + jitter * noise
            scores = mixed / mixed.sum()
        boxes: list[BBox]
        if split_draw < overseg_prob and gt.bbox.width >= 40.0:
            xm = gt.bbox.x1 + gt.bbox.width * split_at
            boxes = [
                BBox(gt.bbox.x1, gt.bbox.y1, xm - 1.0, gt.bbox.y2),
                BBox(xm + 1.0, gt.bbox.y1, gt.bbox.x2, gt.bbox.y2),
            ]
        else:
            boxes = [gt.bbox]
        for part, box in enumerate(boxes):
            pred_lines.append(
                TextLine(
                    id=len(pred_lines),
                    bbox=box,
                    confidence=1.0,
                    class_scores=tuple(float(s) for s in scores),
                    text=gt.text if len(boxes) == 1 else f"{gt.text}/{part}",
                )
            )

    return Document(
        name=name or f"synth-{seed}",
        image_width=width,
        image_height=height,
        class_set=FUNSD_CLASSES,
        lines=tuple(pred_lines),
        gt_lines=tuple(gt_lines),
        gt_entities=tuple(entities),
        gt_relationships=frozenset(relationships),
        gt_links_directed=tuple(directed),
    )
