"""Form structure extraction on text-line graphs.

Detected text lines become graph nodes, a learned proposal picks candidate
edges, and three graph-network stages alternately score and edit the graph
(merging over-segmented lines, grouping lines into entities, pruning bad
edges) until the surviving nodes are entities and the surviving edges are
relationships.
"""

__version__ = "0.1.0"

from .constants import EDIT_THRESHOLDS, EditThresholds
from .docmodel import (
    ClassSet,
    Document,
    Entity,
    FUNSD_CLASSES,
    NAF_CLASSES,
    TextLine,
    load_document,
    load_funsd,
    load_naf,
    save_document,
    synth_form,
)
from .errors import DataError, FormgraphError, UsageError, WeightFormatError
from .geometry import BBox, clipped_iou, iou, line_of_sight, union_bbox
from .graphedit import FormGraph, apply_edit_step, finalize, init_graph
from .metrics import EvalReport
from .pipeline import InferenceResult, evaluate_documents, run_document
from .proposal import ProposalWeights, score_pairs, select_edges
from .supervision import assign_lines, derive_labels, proposal_labels, train_proposal_mlp
from .weights import ModelWeights, read_fgw, write_fgw

__all__ = [
    "BBox",
    "ClassSet",
    "DataError",
    "Document",
    "EDIT_THRESHOLDS",
    "EditThresholds",
    "Entity",
    "EvalReport",
    "FormGraph",
    "FormgraphError",
    "FUNSD_CLASSES",
    "InferenceResult",
    "ModelWeights",
    "NAF_CLASSES",
    "ProposalWeights",
    "TextLine",
    "UsageError",
    "WeightFormatError",
    "apply_edit_step",
    "assign_lines",
    "clipped_iou",
    "derive_labels",
    "evaluate_documents",
    "finalize",
    "init_graph",
    "iou",
    "line_of_sight",
    "load_document",
    "load_funsd",
    "load_naf",
    "proposal_labels",
    "read_fgw",
    "run_document",
    "save_document",
    "score_pairs",
    "select_edges",
    "synth_form",
    "train_proposal_mlp",
    "union_bbox",
    "write_fgw",
]
