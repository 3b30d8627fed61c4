"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from formgraph.gnn import AttentionWeights, GCNStage, GNBlock, LinearHead, Mlp2


def random_mlp2(rng: np.random.Generator, in_dim: int, dim: int, groups: int, zero_out: bool = False) -> Mlp2:
    w2 = np.zeros((dim, dim)) if zero_out else rng.standard_normal((dim, dim)) / np.sqrt(dim)
    return Mlp2(
        w1=rng.standard_normal((dim, in_dim)) / np.sqrt(in_dim),
        b1=rng.standard_normal(dim) * 0.1,
        gamma=1.0 + 0.1 * rng.standard_normal(dim),
        beta=0.1 * rng.standard_normal(dim),
        w2=w2,
        b2=np.zeros(dim) if zero_out else rng.standard_normal(dim) * 0.1,
        groups=groups,
    )


def random_attention(rng: np.random.Generator, dim: int, heads: int) -> AttentionWeights:
    scale = 1.0 / np.sqrt(dim)
    return AttentionWeights(
        wq=rng.standard_normal((dim, dim)) * scale,
        wk=rng.standard_normal((dim, dim)) * scale,
        wv=rng.standard_normal((dim, dim)) * scale,
        wo=rng.standard_normal((dim, dim)) * scale,
        heads=heads,
    )


def random_block(rng: np.random.Generator, dim: int, heads: int, groups: int, zero_out: bool = False) -> GNBlock:
    return GNBlock(
        edge_mlp=random_mlp2(rng, 3 * dim, dim, groups, zero_out=zero_out),
        node_mlp=random_mlp2(rng, 2 * dim, dim, groups, zero_out=zero_out),
        attn=random_attention(rng, dim, heads),
    )


def random_stage(
    rng: np.random.Generator,
    dim: int = 64,
    depth: int = 3,
    heads: int = 4,
    groups: int = 8,
    classes: int = 4,
    zero_out: bool = False,
) -> GCNStage:
    return GCNStage(
        blocks=tuple(random_block(rng, dim, heads, groups, zero_out=zero_out) for _ in range(depth)),
        node_head=LinearHead(rng.standard_normal((classes, dim)) / np.sqrt(dim), rng.standard_normal(classes) * 0.1),
        edge_head=LinearHead(rng.standard_normal((4, dim)) / np.sqrt(dim), rng.standard_normal(4) * 0.1),
    )


def random_graph_arrays(rng: np.random.Generator, n: int, e: int, dim: int):
    """Random node features, unordered pairs without duplicates, edge features."""
    all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    idx = rng.permutation(len(all_pairs))[:e]
    pairs = [all_pairs[i] for i in idx]
    return (
        rng.standard_normal((n, dim)),
        pairs,
        rng.standard_normal((len(pairs), dim)),
    )


def stage_params_for_oracle(stage: GCNStage) -> tuple[list[dict], dict]:
    """Repackage a GCNStage as plain dicts for the dense reference code."""
    blocks = []
    for block in stage.blocks:
        blocks.append(
            {
                "edge_mlp": {
                    "w1": block.edge_mlp.w1, "b1": block.edge_mlp.b1,
                    "gamma": block.edge_mlp.gamma, "beta": block.edge_mlp.beta,
                    "w2": block.edge_mlp.w2, "b2": block.edge_mlp.b2,
                },
                "node_mlp": {
                    "w1": block.node_mlp.w1, "b1": block.node_mlp.b1,
                    "gamma": block.node_mlp.gamma, "beta": block.node_mlp.beta,
                    "w2": block.node_mlp.w2, "b2": block.node_mlp.b2,
                },
                "attn": {
                    "wq": block.attn.wq, "wk": block.attn.wk,
                    "wv": block.attn.wv, "wo": block.attn.wo,
                },
            }
        )
    heads = {
        "node_w": stage.node_head.w, "node_b": stage.node_head.b,
        "edge_w": stage.edge_head.w, "edge_b": stage.edge_head.b,
    }
    return blocks, heads


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
