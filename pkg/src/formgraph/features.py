"""Node and edge features: visual context requests, spatial vectors, transitions.

Visual descriptors come from a pluggable provider. The pipeline never touches
pixels itself; it describes the crop it wants (window, mask grid, mask boxes)
and the provider returns a fixed-width vector. A deterministic stub provider
is included so the whole system runs without any image backend.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .constants import (
    CONTEXT_PAD,
    EDGE_MASK_CHANNELS,
    EDGE_MASK_GRID,
    NODE_MASK_CHANNELS,
    NODE_MASK_GRID,
    VISUAL_FEATURE_DIM,
)
from .docmodel import Document, TextLine
from .errors import UsageError
from .geometry import BBox, union_bbox
from .numerics import exact_mean

MaskChannel = tuple[BBox, ...]


@dataclass(frozen=True)
class ProviderRequest:
    """A crop description sent to the visual feature provider.

    window is the padded, image-clamped region of interest. Each mask channel
    is a set of boxes (stored sorted) that the provider may rasterize onto
    `grid` to tell the backbone which lines matter: nodes send
    [all lines, own lines]; edges send [all lines, side A, side B].
    """

    window: BBox
    grid: tuple[int, int]
    mask_channels: tuple[MaskChannel, ...]

    def __post_init__(self) -> None:
        if self.window.width <= 0 or self.window.height <= 0:
            raise UsageError(f"context window has no area: {self.window}")
        if len(self.mask_channels) not in (NODE_MASK_CHANNELS, EDGE_MASK_CHANNELS):
            raise UsageError(f"expected 2 or 3 mask channels, got {len(self.mask_channels)}")


Provider = Callable[[ProviderRequest], np.ndarray]


def _sorted_channel(boxes: Sequence[BBox]) -> MaskChannel:
    return tuple(sorted(boxes))


def _window(boxes: Sequence[BBox], width: float, height: float) -> BBox:
    return union_bbox(boxes).padded(CONTEXT_PAD).clamped(width, height)


def node_context(
    own_boxes: Sequence[BBox],
    all_boxes: Sequence[BBox],
    image_width: float,
    image_height: float,
) -> ProviderRequest:
    """Context request for one graph node."""
    return ProviderRequest(
        window=_window(own_boxes, image_width, image_height),
        grid=NODE_MASK_GRID,
        mask_channels=(_sorted_channel(all_boxes), _sorted_channel(own_boxes)),
    )


def edge_context(
    boxes_a: Sequence[BBox],
    boxes_b: Sequence[BBox],
    all_boxes: Sequence[BBox],
    image_width: float,
    image_height: float,
) -> ProviderRequest:
    """Context request for one edge: window covers both endpoints."""
    return ProviderRequest(
        window=_window(tuple(boxes_a) + tuple(boxes_b), image_width, image_height),
        grid=EDGE_MASK_GRID,
        mask_channels=(
            _sorted_channel(all_boxes),
            _sorted_channel(boxes_a),
            _sorted_channel(boxes_b),
        ),
    )


# ---------------------------------------------------------------------------
# spatial vectors
# ---------------------------------------------------------------------------

def node_spatial_dim(class_count: int) -> int:
    return 3 + class_count


def edge_spatial_dim(class_count: int) -> int:
    return 8 + 2 * class_count


def _member_stats(members: Sequence[TextLine]) -> tuple[float, np.ndarray]:
    """Mean confidence and mean class scores over constituent input lines."""
    if not members:
        raise UsageError("node with no constituent lines")
    conf = exact_mean([ln.confidence for ln in members])
    mat = np.array([ln.class_scores for ln in members], dtype=np.float64)
    classes = np.array([exact_mean(list(mat[:, j])) for j in range(mat.shape[1])])
    return conf, classes


def node_spatial(
    members: Sequence[TextLine],
    boxes: Sequence[BBox],
    image_width: float,
    image_height: float,
) -> np.ndarray:
    """[confidence, height, width, class scores], sizes normalized by the image."""
    conf, classes = _member_stats(members)
    cover = union_bbox(boxes)
    head = np.array([conf, cover.height / image_height, cover.width / image_width])
    return np.concatenate([head, classes])


def edge_spatial(
    members_a: Sequence[TextLine],
    boxes_a: Sequence[BBox],
    members_b: Sequence[TextLine],
    boxes_b: Sequence[BBox],
    image_width: float,
    image_height: float,
) -> np.ndarray:
    """[h_a, h_b, w_a, w_b, classes_a, classes_b, corner distances], normalized."""
    _, cls_a = _member_stats(members_a)
    _, cls_b = _member_stats(members_b)
    ca = union_bbox(boxes_a)
    cb = union_bbox(boxes_b)
    sizes = np.array([
        ca.height / image_height,
        cb.height / image_height,
        ca.width / image_width,
        cb.width / image_width,
    ])
    dists = np.array([
        np.hypot((ax - bx) / image_width, (ay - by) / image_height)
        for (ax, ay), (bx, by) in zip(ca.corners(), cb.corners())
    ])
    return np.concatenate([sizes, cls_a, cls_b, dists])


# ---------------------------------------------------------------------------
# stub provider
# ---------------------------------------------------------------------------

def _canonical_key(request: ProviderRequest) -> bytes:
    """Stable byte key: coordinates rounded to 0.1 px, channels as sorted multisets."""
    def rounded(box: BBox) -> tuple[int, int, int, int]:
        return tuple(int(round(v * 10.0)) for v in box.as_tuple())  # type: ignore[return-value]

    payload = (
        rounded(request.window),
        request.grid,
        tuple(tuple(sorted(rounded(b) for b in ch)) for ch in request.mask_channels),
    )
    return repr(payload).encode("ascii")


def stub_provider(request: ProviderRequest) -> np.ndarray:
    """Deterministic stand-in for a visual backbone.

    Produces a pseudo-random unit-variance vector keyed only by the request
    content, so equal crops give equal features across runs and processes.
    """
    digest = hashlib.blake2b(_canonical_key(request), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(VISUAL_FEATURE_DIM)


def resolve_provider(spec: str) -> Provider:
    """Provider lookup for the CLI: 'stub' or 'module.path:attribute'."""
    if spec == "stub":
        return stub_provider
    if ":" not in spec:
        raise UsageError(f"provider {spec!r} is neither 'stub' nor 'module:attribute'")
    module_name, _, attr = spec.partition(":")
    import importlib

    try:
        module = importlib.import_module(module_name)
        provider = getattr(module, attr)
    except (ImportError, AttributeError) as exc:
        raise UsageError(f"cannot load provider {spec!r}: {exc}") from exc
    if not callable(provider):
        raise UsageError(f"provider {spec!r} is not callable")
    return provider


def call_provider(provider: Provider, request: ProviderRequest) -> np.ndarray:
    """Invoke the provider and validate its output contract."""
    vec = np.asarray(provider(request), dtype=np.float64)
    if vec.shape != (VISUAL_FEATURE_DIM,):
        raise UsageError(
            f"provider returned shape {vec.shape}, expected ({VISUAL_FEATURE_DIM},)"
        )
    if not np.all(np.isfinite(vec)):
        raise UsageError("provider returned non-finite values")
    return vec


# ---------------------------------------------------------------------------
# initial features and transitions
# ---------------------------------------------------------------------------

def compute_node_initial(
    members: Sequence[TextLine],
    boxes: Sequence[BBox],
    all_boxes: Sequence[BBox],
    doc: Document,
    provider: Provider,
) -> np.ndarray:
    """Concatenated [visual, spatial] vector for a node."""
    request = node_context(boxes, all_boxes, doc.image_width, doc.image_height)
    visual = call_provider(provider, request)
    spatial = node_spatial(members, boxes, doc.image_width, doc.image_height)
    return np.concatenate([visual, spatial])


def compute_edge_initial(
    members_a: Sequence[TextLine],
    boxes_a: Sequence[BBox],
    members_b: Sequence[TextLine],
    boxes_b: Sequence[BBox],
    all_boxes: Sequence[BBox],
    doc: Document,
    provider: Provider,
) -> np.ndarray:
    """Concatenated [visual, spatial] vector for an edge."""
    request = edge_context(boxes_a, boxes_b, all_boxes, doc.image_width, doc.image_height)
    visual = call_provider(provider, request)
    spatial = edge_spatial(members_a, boxes_a, members_b, boxes_b, doc.image_width, doc.image_height)
    return np.concatenate([visual, spatial])


def apply_transition(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Single linear map that brings an initial feature to the working width."""
    if w.shape[1] != x.shape[-1]:
        raise UsageError(f"transition expects width {w.shape[1]}, got {x.shape[-1]}")
    return w @ x.astype(w.dtype) + b


# ---------------------------------------------------------------------------
# graph wiring
# ---------------------------------------------------------------------------

def _graph_views(graph, doc: Document):
    """Member lines per node plus the page-wide box list, in canonical order."""
    line_map = doc.line_by_id()
    members: dict[int, list[TextLine]] = {}
    for nid, node in graph.nodes.items():
        try:
            members[nid] = [line_map[i] for i in sorted(node.line_ids)]
        except KeyError as exc:
            raise UsageError(f"node {nid} references a line the document lacks: {exc}") from exc
    all_boxes = sorted(box for node in graph.nodes.values() for box in node.boxes)
    return members, all_boxes


def init_graph_features(graph, doc: Document, provider: Provider, weights) -> "FormGraph":
    """Give every node and edge its working feature via the initial transitions.

    The raw [visual, spatial] vectors are cached on the graph so later
    reintroduction only recomputes them where contraction changed geometry.
    """
    members, all_boxes = _graph_views(graph, doc)
    node_head = weights.init_node()
    edge_head = weights.init_edge()

    node_feats, node_initials = {}, {}
    for nid, node in graph.nodes.items():
        initial = compute_node_initial(members[nid], node.boxes, all_boxes, doc, provider)
        node_initials[nid] = initial
        node_feats[nid] = apply_transition(node_head.w, node_head.b, initial)

    edge_feats, edge_initials = {}, {}
    for (a, b) in graph.edges:
        initial = compute_edge_initial(
            members[a], graph.nodes[a].boxes,
            members[b], graph.nodes[b].boxes,
            all_boxes, doc, provider,
        )
        edge_initials[(a, b)] = initial
        edge_feats[(a, b)] = apply_transition(edge_head.w, edge_head.b, initial)

    return graph.with_features(node_feats, edge_feats, node_initials, edge_initials)


def reintroduce_features(graph, doc: Document, provider: Provider, stage) -> "FormGraph":
    """Refresh working features before a later stage.

    Each node and edge gets a fresh [visual, spatial] initial vector for its
    current geometry (cached ones are reused where nothing changed), and the
    stage's reintroduction map projects [current feature, initial] back to the
    working width.
    """
    if stage.reintro_node is None or stage.reintro_edge is None:
        raise UsageError("stage has no reintroduction maps; only later stages reintroduce")
    members, all_boxes = _graph_views(graph, doc)

    node_feats, node_initials = {}, {}
    for nid, node in graph.nodes.items():
        if node.feat is None:
            raise UsageError(f"node {nid} has no working feature; initialize the graph first")
        initial = node.initial
        if initial is None:
            initial = compute_node_initial(members[nid], node.boxes, all_boxes, doc, provider)
        node_initials[nid] = initial
        stacked = np.concatenate([np.asarray(node.feat, dtype=np.float64), initial])
        node_feats[nid] = apply_transition(stage.reintro_node.w, stage.reintro_node.b, stacked)

    edge_feats, edge_initials = {}, {}
    for (a, b), edge in graph.edges.items():
        if edge.feat is None:
            raise UsageError(f"edge ({a}, {b}) has no working feature; initialize the graph first")
        initial = edge.initial
        if initial is None:
            initial = compute_edge_initial(
                members[a], graph.nodes[a].boxes,
                members[b], graph.nodes[b].boxes,
                all_boxes, doc, provider,
            )
        edge_initials[(a, b)] = initial
        stacked = np.concatenate([np.asarray(edge.feat, dtype=np.float64), initial])
        edge_feats[(a, b)] = apply_transition(stage.reintro_edge.w, stage.reintro_edge.b, stacked)

    return graph.with_features(node_feats, edge_feats, node_initials, edge_initials)
