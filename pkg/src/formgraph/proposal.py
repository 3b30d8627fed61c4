"""Edge proposal: hand-built pair features, a 2-layer scorer, and top-half selection.

Evaluating the full graph network on all O(n^2) line pairs is wasteful; a tiny
MLP over cheap spatial features scores every unordered pair first, and only
the best half (capped) become edges of the initial graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .constants import PROPOSAL_EDGE_CAP, PROPOSAL_KEEP_FRACTION
from .docmodel import Document, TextLine, confident_lines
from .errors import UsageError
from .geometry import BBox, line_of_sight
from .numerics import sigmoid


def proposal_feature_dim(class_count: int) -> int:
    """Width of the pair feature vector for a given class-set size."""
    # 10 corner/center deltas + 4 sizes + 4 corner distances + 4 center coords
    # + line-of-sight flag + 2 confidences + both class-score blocks
    return 25 + 2 * class_count


@dataclass(frozen=True)
class ProposalWeights:
    """Parameters of the pair scorer: logit = w2 @ relu(w1 @ x + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        hidden, feat = self.w1.shape
        if self.b1.shape != (hidden,):
            raise UsageError(f"b1 shape {self.b1.shape} does not match hidden size {hidden}")
        if self.w2.shape != (1, hidden):
            raise UsageError(f"w2 shape {self.w2.shape}, expected (1, {hidden})")
        if self.b2.shape != (1,):
            raise UsageError(f"b2 shape {self.b2.shape}, expected (1,)")
        del feat

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    def astype(self, dtype) -> "ProposalWeights":
        return ProposalWeights(
            self.w1.astype(dtype), self.b1.astype(dtype),
            self.w2.astype(dtype), self.b2.astype(dtype),
        )


@dataclass(frozen=True)
class EdgeCandidate:
    """A scored unordered line pair; line ids satisfy a < b."""

    a: int
    b: int
    score: float


class PairFeatureBuilder:
    """Computes pair feature vectors for one document.

    Obstacle geometry for the visibility flag is precomputed once; the flag is
    true when the open segment between the two line centers misses every other
    confident line on the page.
    """

    def __init__(self, doc: Document, lines: Sequence[TextLine] | None = None):
        if doc.image_width <= 0 or doc.image_height <= 0:
            raise UsageError("document has non-positive image size")
        self.doc = doc
        self.lines = tuple(lines) if lines is not None else confident_lines(doc)
        self._boxes = {ln.id: ln.bbox for ln in self.lines}

    def features(self, a: TextLine, b: TextLine) -> np.ndarray:
        """Ordered pair feature vector for (a, b); see `proposal_feature_dim`."""
        w, h = self.doc.image_width, self.doc.image_height
        na = _norm_box(a.bbox, w, h)
        nb = _norm_box(b.bbox, w, h)

        parts: list[float] = []
        for (ax, ay), (bx, by) in zip(_points(na), _points(nb)):
            parts.append(ax - bx)
            parts.append(ay - by)
        parts.extend((na.height, nb.height, na.width, nb.width))
        for (ax, ay), (bx, by) in zip(na.corners(), nb.corners()):
            parts.append(math.hypot(ax - bx, ay - by))
        parts.extend((*na.center, *nb.center))
        obstacles = [box for lid, box in self._boxes.items() if lid not in (a.id, b.id)]
        parts.append(1.0 if line_of_sight(a.bbox, b.bbox, obstacles) else 0.0)
        parts.extend((a.confidence, b.confidence))
        parts.extend(a.class_scores)
        parts.extend(b.class_scores)
        return np.asarray(parts, dtype=np.float64)

    def pair_matrix(self) -> tuple[list[tuple[int, int]], np.ndarray, np.ndarray]:
        """All unordered pairs with both ordered feature matrices.

        Returns (pairs, X_ab, X_ba) where pairs[k] = (id_a, id_b) with a < b
        and X rows align with pairs. Pairs are enumerated in ascending id order.
        """
        ordered = sorted(self.lines, key=lambda ln: ln.id)
        pairs: list[tuple[int, int]] = []
        fwd: list[np.ndarray] = []
        rev: list[np.ndarray] = []
        for i in range(len(ordered)):
            for j in range(i + 1, len(ordered)):
                a, b = ordered[i], ordered[j]
                pairs.append((a.id, b.id))
                fwd.append(self.features(a, b))
                rev.append(self.features(b, a))
        dim = proposal_feature_dim(len(self.doc.class_set))
        if not pairs:
            empty = np.zeros((0, dim), dtype=np.float64)
            return [], empty, empty.copy()
        return pairs, np.stack(fwd), np.stack(rev)


def _norm_box(box: BBox, w: float, h: float) -> BBox:
    return BBox(box.x1 / w, box.y1 / h, box.x2 / w, box.y2 / h)


def _points(box: BBox) -> tuple[tuple[float, float], ...]:
    return box.corners() + (box.center,)


def build_proposal_features(a: TextLine, b: TextLine, doc: Document) -> np.ndarray:
    """One-off ordered pair feature vector; prefer PairFeatureBuilder in loops."""
    return PairFeatureBuilder(doc).features(a, b)


def mlp_logits(weights: ProposalWeights, x: np.ndarray) -> np.ndarray:
    """Raw scorer outputs for a batch of feature rows, shape (n,)."""
    x = np.atleast_2d(x)
    if x.shape[1] != weights.feature_dim:
        raise UsageError(
            f"feature width {x.shape[1]} does not match weights ({weights.feature_dim})"
        )
    hidden = np.maximum(x @ weights.w1.T + weights.b1, 0.0)
    return (hidden @ weights.w2.T + weights.b2)[:, 0]


def pair_logits(weights: ProposalWeights, x_ab: np.ndarray, x_ba: np.ndarray) -> np.ndarray:
    """Order-free pair logits: the two ordered logits averaged."""
    return (mlp_logits(weights, x_ab) + mlp_logits(weights, x_ba)) / 2.0


def score_pairs(
    doc: Document,
    weights: ProposalWeights,
    lines: Sequence[TextLine] | None = None,
) -> list[EdgeCandidate]:
    """Score every unordered pair of confident lines.

    Both orderings of each pair run through the scorer and their logits are
    averaged before the sigmoid, so the score is exactly symmetric. Documents
    with fewer than two confident lines yield no candidates.
    """
    builder = PairFeatureBuilder(doc, lines)
    pairs, x_ab, x_ba = builder.pair_matrix()
    if not pairs:
        return []
    scores = sigmoid(pair_logits(weights, x_ab, x_ba))
    return [EdgeCandidate(a, b, float(s)) for (a, b), s in zip(pairs, scores)]


def select_edges(candidates: Sequence[EdgeCandidate]) -> list[tuple[int, int]]:
    """Keep the top ceil(P * keep_fraction) pairs by score, at most the cap.

    Ties are broken toward ascending (a, b), which keeps selection stable
    under reordering of the input.
    """
    if not candidates:
        return []
    keep = math.ceil(len(candidates) * PROPOSAL_KEEP_FRACTION)
    keep = min(keep, PROPOSAL_EDGE_CAP)
    ranked = sorted(candidates, key=lambda c: (-c.score, c.a, c.b))
    return [(c.a, c.b) for c in ranked[:keep]]


# ---------------------------------------------------------------------------
# analytic gradients (used by the trainer and by gradient checking)
# ---------------------------------------------------------------------------

def proposal_loss_and_grad(
    weights: ProposalWeights,
    x_ab: np.ndarray,
    x_ba: np.ndarray,
    y: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean binary cross-entropy of the symmetric pair scorer, with gradients.

    The loss is computed from logits (softplus form), which is the same value
    as BCE on the sigmoid output but stays finite for extreme logits.
    Returns (loss, grads) with grads keyed 'w1', 'b1', 'w2', 'b2'.
    """
    x_ab = np.atleast_2d(np.asarray(x_ab, dtype=np.float64))
    x_ba = np.atleast_2d(np.asarray(x_ba, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x_ab.shape != x_ba.shape or x_ab.shape[0] != y.shape[0]:
        raise UsageError("mismatched batch shapes for pair loss")
    if y.shape[0] == 0:
        raise UsageError("empty batch")

    n = y.shape[0]
    pre_ab = x_ab @ weights.w1.T + weights.b1
    pre_ba = x_ba @ weights.w1.T + weights.b1
    act_ab = np.maximum(pre_ab, 0.0)
    act_ba = np.maximum(pre_ba, 0.0)
    logit_ab = (act_ab @ weights.w2.T + weights.b2)[:, 0]
    logit_ba = (act_ba @ weights.w2.T + weights.b2)[:, 0]
    z = (logit_ab + logit_ba) / 2.0

    # softplus(z) - y*z == -[y log s + (1-y) log(1-s)] for s = sigmoid(z)
    losses = np.where(z > 0, z + np.log1p(np.exp(-z)), np.log1p(np.exp(z))) - y * z
    loss = float(losses.mean())

    dz = (sigmoid(z) - y) / n
    grads = {
        "w1": np.zeros_like(weights.w1),
        "b1": np.zeros_like(weights.b1),
        "w2": np.zeros_like(weights.w2),
        "b2": np.zeros_like(weights.b2),
    }
    for x, pre, act in ((x_ab, pre_ab, act_ab), (x_ba, pre_ba, act_ba)):
        d_logit = dz / 2.0
        grads["w2"] += d_logit[None, :] @ act
        grads["b2"] += np.array([d_logit.sum()])
        d_act = d_logit[:, None] * weights.w2[0][None, :]
        d_pre = d_act * (pre > 0.0)
        grads["w1"] += d_pre.T @ x
        grads["b1"] += d_pre.sum(axis=0)
    return loss, grads
