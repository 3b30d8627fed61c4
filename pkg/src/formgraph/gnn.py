"""Graph-network forward passes: normalization, MLPs, attention, blocks, stages.

Numerical policy: every map is applied row by row (matrix-vector products),
and every reduction over a node's incident edges goes through exactly rounded
sums. A node's output therefore depends only on the multiset of its inputs,
never on storage order, which makes permutation equivariance bitwise exact
instead of merely approximate.

Dropout positions exist in the architecture between activation and the second
linear layer; at inference they are identity maps, and only inference is
implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .constants import ATTENTION_HEADS, GROUPNORM_EPS, GROUPNORM_GROUPS, HIDDEN_DIM
from .errors import UsageError
from .numerics import sigmoid, softmax_rows
from .proposal import ProposalWeights, proposal_loss_and_grad


def linear_rows(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Apply y = w @ x_row (+ b) to each row of x.

    Row-at-a-time evaluation keeps each output row a pure function of its own
    input row, which the exactness guarantees above rely on.
    """
    x = np.atleast_2d(x)
    if w.shape[1] != x.shape[1]:
        raise UsageError(f"linear expects input width {w.shape[1]}, got {x.shape[1]}")
    out = np.empty((x.shape[0], w.shape[0]), dtype=np.result_type(x.dtype, w.dtype))
    for r in range(x.shape[0]):
        row = w @ x[r]
        out[r] = row + b if b is not None else row
    return out


def group_norm(
    x: np.ndarray,
    gamma: np.ndarray | None,
    beta: np.ndarray | None,
    groups: int = GROUPNORM_GROUPS,
    eps: float = GROUPNORM_EPS,
) -> np.ndarray:
    """Per-row group normalization with optional learned affine.

    Each row is split into `groups` equal channel groups; every group is
    shifted and scaled to zero mean and unit variance (population variance)
    before the affine is applied.
    """
    x = np.atleast_2d(x)
    dim = x.shape[-1]
    if dim % groups != 0:
        raise UsageError(f"feature width {dim} not divisible into {groups} groups")
    grouped = x.reshape(x.shape[0], groups, dim // groups)
    mean = grouped.mean(axis=-1, keepdims=True)
    var = grouped.var(axis=-1, keepdims=True)
    normed = ((grouped - mean) / np.sqrt(var + eps)).reshape(x.shape)
    if gamma is not None:
        normed = normed * gamma
    if beta is not None:
        normed = normed + beta
    return normed


@dataclass(frozen=True)
class Mlp2:
    """Two-layer MLP: y = w2 @ relu(norm(w1 @ x + b1)) + b2.

    gamma/beta of None disables normalization (used by identity constructions
    in tests); the trained architecture always carries the affine.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    normalize: bool = True
    groups: int = GROUPNORM_GROUPS


def mlp2_forward(mlp: Mlp2, x: np.ndarray) -> np.ndarray:
    """Row-wise forward pass of a two-layer MLP block."""
    hidden = linear_rows(x, mlp.w1, mlp.b1)
    if mlp.normalize:
        hidden = group_norm(hidden, mlp.gamma, mlp.beta, groups=mlp.groups)
    hidden = np.maximum(hidden, 0.0)
    return linear_rows(hidden, mlp.w2, mlp.b2)


@dataclass(frozen=True)
class AttentionWeights:
    """Projections of multi-head dot-product attention; no bias terms."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int = ATTENTION_HEADS

    def __post_init__(self) -> None:
        dim = self.wq.shape[0]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            if w.shape != (dim, dim):
                raise UsageError(f"attention weight {name} has shape {w.shape}, expected ({dim}, {dim})")
        if dim % self.heads != 0:
            raise UsageError(f"width {dim} not divisible by {self.heads} heads")


def attention_scores(attn: AttentionWeights, query: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Per-head softmax weights over the item set, shape (heads, m).

    Each row sums to 1. The normalization uses exactly rounded sums, so the
    weights do not depend on item order.
    """
    m = items.shape[0]
    if m == 0:
        raise UsageError("attention weights over an empty item set are undefined")
    heads = attn.heads
    d_head = attn.wq.shape[0] // heads
    q = (attn.wq @ query).reshape(heads, d_head)
    k = linear_rows(items, attn.wk).reshape(m, heads, d_head)
    logits = np.einsum("hd,mhd->hm", q, k) / math.sqrt(d_head)

    weights = np.empty_like(logits)
    for h in range(heads):
        row = logits[h]
        shifted = np.exp(row - row.max())
        denom = math.fsum(shifted.tolist())
        weights[h] = shifted / denom
    return weights


def attention_aggregate(attn: AttentionWeights, query: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Multi-head attention readout of `items` driven by `query`.

    An empty item set aggregates to the zero vector. The per-head weighted
    sums are exactly rounded, so the output is invariant to item order.
    """
    dim = attn.wq.shape[0]
    if items.shape[0] == 0:
        return np.zeros(dim, dtype=query.dtype)
    heads = attn.heads
    d_head = dim // heads
    m = items.shape[0]

    weights = attention_scores(attn, query, items)
    v = linear_rows(items, attn.wv).reshape(m, heads, d_head)
    weighted = weights.T[:, :, None] * v
    concat = np.empty(dim, dtype=weighted.dtype)
    columns = weighted.reshape(m, dim).T.tolist()
    for d in range(dim):
        concat[d] = math.fsum(columns[d])
    return (attn.wo @ concat).astype(query.dtype, copy=False)


@dataclass(frozen=True)
class GNBlock:
    """One residual graph-network block: edge update, then attention node update."""

    edge_mlp: Mlp2
    node_mlp: Mlp2
    attn: AttentionWeights


def gn_block_forward(
    block: GNBlock,
    node_feats: np.ndarray,
    edge_src: np.ndarray,
    edge_dst: np.ndarray,
    edge_feats: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Run one block over a directed graph.

    Edges update first from [edge, source node, destination node]; nodes then
    update from the attention-aggregated updated incoming edges concatenated
    with their own features. Both updates are residual.
    """
    n = node_feats.shape[0]
    e = edge_feats.shape[0]
    if edge_src.shape != (e,) or edge_dst.shape != (e,):
        raise UsageError("edge index arrays do not match edge feature count")
    if e and (edge_src.min() < 0 or edge_src.max() >= n or edge_dst.min() < 0 or edge_dst.max() >= n):
        raise UsageError("edge endpoint index out of range")

    if e:
        edge_in = np.concatenate([edge_feats, node_feats[edge_src], node_feats[edge_dst]], axis=1)
        new_edges = edge_feats + mlp2_forward(block.edge_mlp, edge_in)
    else:
        new_edges = edge_feats.copy()

    incoming: list[list[int]] = [[] for _ in range(n)]
    for idx in range(e):
        incoming[edge_dst[idx]].append(idx)

    dim = node_feats.shape[1]
    aggregated = np.zeros((n, dim), dtype=node_feats.dtype)
    for node in range(n):
        idxs = incoming[node]
        if idxs:
            aggregated[node] = attention_aggregate(block.attn, node_feats[node], new_edges[idxs])

    node_in = np.concatenate([aggregated, node_feats], axis=1)
    new_nodes = node_feats + mlp2_forward(block.node_mlp, node_in)
    return new_nodes, new_edges


@dataclass(frozen=True)
class LinearHead:
    w: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class GCNStage:
    """A stack of GN blocks plus classification heads and optional reintroduction maps."""

    blocks: tuple[GNBlock, ...]
    node_head: LinearHead
    edge_head: LinearHead
    reintro_node: LinearHead | None = None
    reintro_edge: LinearHead | None = None


@dataclass(frozen=True)
class StageResult:
    """Outputs of one stage, aligned with the node/edge order passed in.

    edge_scores columns follow EDGE_SCORE_FIELDS: prune, merge, group,
    relationship. node_class_scores rows are softmax distributions.
    """

    node_feats: np.ndarray
    edge_feats: np.ndarray
    node_class_scores: np.ndarray
    edge_scores: np.ndarray


def gcn_stage_forward(
    stage: GCNStage,
    node_feats: np.ndarray,
    edge_pairs: Sequence[tuple[int, int]],
    edge_feats: np.ndarray,
) -> StageResult:
    """Run one stage over an undirected graph given by positional node indices.

    Every undirected edge is duplicated into both directions sharing the same
    initial feature; after the blocks the two directions are averaged back
    into one feature per undirected edge, which the edge head scores. The
    result is exactly symmetric in the orientation the caller chose for each
    pair.
    """
    node_feats = np.atleast_2d(node_feats)
    n = node_feats.shape[0]
    e = len(edge_pairs)
    if e:
        edge_feats = np.atleast_2d(edge_feats)
        if edge_feats.shape[0] != e:
            raise UsageError(f"{e} edge pairs but {edge_feats.shape[0]} edge feature rows")
    else:
        edge_feats = np.zeros((0, node_feats.shape[1]), dtype=node_feats.dtype)
    for a, b in edge_pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise UsageError(f"edge ({a}, {b}) references a missing node")
        if a == b:
            raise UsageError(f"self edge on node {a}")

    src = np.fromiter((a for a, _ in edge_pairs), dtype=np.int64, count=e)
    dst = np.fromiter((b for _, b in edge_pairs), dtype=np.int64, count=e)
    edge_src = np.concatenate([src, dst])
    edge_dst = np.concatenate([dst, src])
    directed = np.concatenate([edge_feats, edge_feats], axis=0)

    h = node_feats
    for block in stage.blocks:
        h, directed = gn_block_forward(block, h, edge_src, edge_dst, directed)

    merged = (directed[:e] + directed[e:]) / 2.0 if e else directed[:0]

    node_logits = linear_rows(h, stage.node_head.w, stage.node_head.b)
    node_scores = softmax_rows(node_logits)
    if e:
        edge_scores = sigmoid(linear_rows(merged, stage.edge_head.w, stage.edge_head.b))
    else:
        edge_scores = np.zeros((0, stage.edge_head.w.shape[0]), dtype=node_feats.dtype)
    return StageResult(
        node_feats=h,
        edge_feats=merged,
        node_class_scores=node_scores,
        edge_scores=edge_scores,
    )


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _linear_mean_loss(params: Mapping[str, np.ndarray], x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    w, b = params["w"], params["b"]
    y = x @ w.T + b
    loss = float(y.mean())
    scale = 1.0 / y.size
    dw = np.tile(x.mean(axis=0) * (x.shape[0] * scale), (w.shape[0], 1))
    db = np.full(b.shape, x.shape[0] * scale)
    return loss, {"w": dw, "b": db}


def _proposal_bce_loss(params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray]):
    weights = ProposalWeights(params["w1"], params["b1"], params["w2"], params["b2"])
    return proposal_loss_and_grad(weights, inputs["x_ab"], inputs["x_ba"], inputs["y"])


def finite_diff_gradcheck(
    function_id: str,
    params: Mapping[str, np.ndarray],
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    Returns the maximum relative error over every parameter coordinate, where
    the relative error of (analytic a, numeric g) is |a - g| / max(|a|, |g|,
    1e-8). Everything is evaluated in float64.

    Raises:
        UsageError: for eps <= 0 or an unknown function id.
    """
    if eps <= 0.0:
        raise UsageError(f"eps must be positive, got {eps}")
    if function_id == "linear":
        def evaluate(p):
            return _linear_mean_loss(p, inputs["x"])
    elif function_id == "proposal_bce":
        def evaluate(p):
            return _proposal_bce_loss(p, inputs)
    else:
        raise UsageError(f"unknown gradcheck function {function_id!r}")

    # private C-contiguous copies so ravel() below is a mutable view
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = evaluate(params)
    worst = 0.0
    for key, tensor in params.items():
        grad = analytic[key]
        flat = tensor.ravel()
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            hi, _ = evaluate(params)
            flat[i] = original - eps
            lo, _ = evaluate(params)
            flat[i] = original
            numeric = (hi - lo) / (2.0 * eps)
            a = float(grad.ravel()[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    if not math.isfinite(worst):
        raise UsageError("gradient check produced non-finite values")
    return worst


def run_gradcheck_suite(
    draws: int,
    eps: float = 1e-5,
    seed: int = 0,
    function_id: str = "proposal_bce",
    batch: int = 8,
    feature_dim: int = 16,
    hidden: int = 16,
) -> float:
    """Maximum gradcheck error over several random parameter/input draws.

    For the ReLU network, draws that land a hidden pre-activation within 1e-3
    of its kink are resampled: central differences straddle the kink there and
    measure nothing about the gradient code.
    """
    if draws < 1:
        raise UsageError("need at least one draw")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        if function_id == "linear":
            params = {
                "w": rng.standard_normal((hidden, feature_dim)),
                "b": rng.standard_normal(hidden),
            }
            inputs = {"x": rng.standard_normal((batch, feature_dim))}
        elif function_id == "proposal_bce":
            params, inputs = _sample_away_from_kinks(rng, batch, feature_dim, hidden)
        else:
            raise UsageError(f"unknown gradcheck function {function_id!r}")
        worst = max(worst, finite_diff_gradcheck(function_id, params, inputs, eps=eps))
    return worst


def _sample_away_from_kinks(
    rng: np.random.Generator,
    batch: int,
    feature_dim: int,
    hidden: int,
    margin: float = 1e-3,
    attempts: int = 1000,
):
    for _ in range(attempts):
        params = {
            "w1": rng.standard_normal((hidden, feature_dim)) / math.sqrt(feature_dim),
            "b1": rng.standard_normal(hidden) * 0.1,
            "w2": rng.standard_normal((1, hidden)) / math.sqrt(hidden),
            "b2": rng.standard_normal(1) * 0.1,
        }
        inputs = {
            "x_ab": rng.standard_normal((batch, feature_dim)),
            "x_ba": rng.standard_normal((batch, feature_dim)),
            "y": rng.integers(0, 2, size=batch).astype(np.float64),
        }
        closest = min(
            float(np.abs(inputs[key] @ params["w1"].T + params["b1"]).min())
            for key in ("x_ab", "x_ba")
        )
        if closest > margin:
            return params, inputs
    raise UsageError("could not sample a kink-free configuration")
