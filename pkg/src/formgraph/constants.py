"""Protocol constants for the inference pipeline.

Everything here is part of the model's operating contract rather than a tuning
knob: code reads these values instead of hard-coding them inline, and tests
introspect them by name.
"""

from __future__ import annotations

from typing import NamedTuple


class EditThresholds(NamedTuple):
    """Score cutoffs for one graph edit step (applied in merge, group, prune order)."""

    merge: float
    group: float
    prune: float


# Detected lines below this confidence never enter the graph.
DETECTION_CONFIDENCE_THRESHOLD = 0.5

# Proposal stage keeps the top ceil(P/2) pairs by score...
PROPOSAL_KEEP_FRACTION = 0.5
# ...but never more than this many edges.
PROPOSAL_EDGE_CAP = 900

# Feature width used everywhere in the graph network.
HIDDEN_DIM = 256

# Visual descriptor width the feature provider must emit.
VISUAL_FEATURE_DIM = 256

# Context windows are padded this many pixels on every side before clamping.
CONTEXT_PAD = 20

# Spatial mask grids: nodes get [all-lines, own-lines] channels,
# edges get [all-lines, side-A, side-B] channels.
NODE_MASK_GRID = (10, 10)
EDGE_MASK_GRID = (16, 16)
NODE_MASK_CHANNELS = 2
EDGE_MASK_CHANNELS = 3

# Graph-network stage depths (number of residual blocks per stage).
STAGE_DEPTHS = (7, 7, 4)
ATTENTION_HEADS = 4
GROUPNORM_GROUPS = 8
GROUPNORM_EPS = 1e-5

# Edge head emits sigmoid scores in this order.
EDGE_SCORE_FIELDS = ("prune", "merge", "group", "relationship")

# Per-iteration cutoffs for the three edit steps.
EDIT_THRESHOLDS = (
    EditThresholds(merge=0.8, group=0.95, prune=0.9),
    EditThresholds(merge=0.9, group=0.9, prune=0.8),
    EditThresholds(merge=0.9, group=0.6, prune=0.5),
)

# Edges below this relationship score are dropped when the final graph is read out.
RELATIONSHIP_THRESHOLD = 0.5

# Ground-truth alignment: clipped-IOU floor for assigning a predicted line to a GT line.
ALIGNMENT_IOU_THRESHOLD = 0.4

# Evaluation: plain-IOU floor for counting a predicted line as matching a GT line.
EVAL_IOU_THRESHOLD = 0.5

# Historical-form annotations store polygons at full resolution; images are
# worked on at this scale, so boxes are multiplied by it on load.
NAF_SCALE = 0.52
