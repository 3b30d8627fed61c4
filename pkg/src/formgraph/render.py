"""SVG overlays of predicted graphs, optionally scored against ground truth.

Output is plain SVG text with no timestamps or random ids, so the same inputs
always render the same bytes.
"""

from __future__ import annotations

from typing import Sequence

from .docmodel import Document
from .graphedit import PredictedEntity
from .metrics import entity_verdicts, relationship_verdicts

# one stroke color per class index, cycled if a class set is larger
CLASS_COLORS = ("#1f6fd6", "#00b2c8", "#e0a800", "#c837ab")

EDGE_OK = "#1faa4c"
EDGE_WRONG = "#d62718"
EDGE_PLAIN = "#666666"
MISSED = "#d62718"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _center(entity: PredictedEntity) -> tuple[float, float]:
    xs = [c for box in entity.boxes for c in (box.x1, box.x2)]
    ys = [c for box in entity.boxes for c in (box.y1, box.y2)]
    return (min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0


def svg_overlay(
    doc: Document,
    entities: Sequence[PredictedEntity],
    relationships: Sequence[tuple[int, int]],
    against_gt: bool = True,
) -> str:
    """Render predicted entities and relationships over the page extent.

    With against_gt, predictions are matched to the document's annotations:
    correct items draw green-edged, wrong ones red, and missed GT entities
    appear as dashed red boxes. Without it everything draws neutrally.
    """
    class_colors = {
        label: CLASS_COLORS[i % len(CLASS_COLORS)]
        for i, label in enumerate(doc.class_set.labels)
    }
    use_gt = against_gt and bool(doc.gt_entities)
    ent_flags: list[bool] | None = None
    missed_entities: list[int] = []
    rel_flags: list[bool] | None = None
    missed_rels: list[tuple[int, int]] = []
    if use_gt:
        ent_flags, missed_entities = entity_verdicts(entities, doc)
        rel_flags, missed_rels = relationship_verdicts(entities, list(relationships), doc)

    parts: list[str] = []
    parts.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{doc.image_width:g}" '
        f'height="{doc.image_height:g}" viewBox="0 0 {doc.image_width:g} {doc.image_height:g}">'
    )
    parts.append(f"<title>{_esc(doc.name)}</title>")
    parts.append(f'<rect x="0" y="0" width="{doc.image_width:g}" height="{doc.image_height:g}" fill="#ffffff"/>')

    by_id = {e.node_id: e for e in entities}
    for k, (a, b) in enumerate(relationships):
        (xa, ya) = _center(by_id[a])
        (xb, yb) = _center(by_id[b])
        color = EDGE_PLAIN if rel_flags is None else (EDGE_OK if rel_flags[k] else EDGE_WRONG)
        parts.append(
            f'<line x1="{xa:.1f}" y1="{ya:.1f}" x2="{xb:.1f}" y2="{yb:.1f}" '
            f'stroke="{color}" stroke-width="2"/>'
        )

    for i, ent in enumerate(entities):
        color = class_colors.get(ent.label, EDGE_PLAIN)
        wrong = ent_flags is not None and not ent_flags[i]
        for box in ent.boxes:
            parts.append(
                f'<rect x="{box.x1:.1f}" y="{box.y1:.1f}" width="{box.width:.1f}" '
                f'height="{box.height:.1f}" fill="{color}" fill-opacity="0.15" '
                f'stroke="{EDGE_WRONG if wrong else color}" stroke-width="2"/>'
            )

    gt_map = doc.gt_line_by_id() if use_gt else {}
    for idx in missed_entities:
        for lid in doc.gt_entities[idx].line_ids:
            box = gt_map[lid].bbox
            parts.append(
                f'<rect x="{box.x1:.1f}" y="{box.y1:.1f}" width="{box.width:.1f}" '
                f'height="{box.height:.1f}" fill="none" stroke="{MISSED}" '
                f'stroke-width="2" stroke-dasharray="6 3"/>'
            )
    del missed_rels  # missed relationships have no stable anchor to draw

    parts.append("</svg>")
    return "\n".join(parts) + "\n"
