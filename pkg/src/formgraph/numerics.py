"""Small numerical helpers shared by the proposal scorer and the graph network."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    # exp never sees a large positive argument on either branch
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max for stability."""
    z = np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log1p_exp(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow for large positive x."""
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def exact_sum(values: Iterable[float]) -> float:
    """Exactly rounded float sum; the result does not depend on summand order."""
    return math.fsum(values)


def exact_mean(values: Sequence[float]) -> float:
    """Order-independent mean built on an exactly rounded sum."""
    if not values:
        raise ValueError("mean of empty sequence")
    return math.fsum(values) / len(values)


def exact_mean_vectors(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise order-independent mean of equally shaped vectors.

    Used wherever a reduction must be bitwise identical under any permutation
    of its inputs (node contraction, parallel-edge averaging).
    """
    if not vectors:
        raise ValueError("mean of empty sequence")
    first = np.asarray(vectors[0], dtype=np.float64)
    if len(vectors) == 1:
        return first.copy()
    stacked = [np.asarray(v, dtype=np.float64) for v in vectors]
    flat = np.stack([v.ravel() for v in stacked], axis=0)
    n = flat.shape[0]
    out = np.array([math.fsum(flat[:, j]) / n for j in range(flat.shape[1])], dtype=np.float64)
    return out.reshape(first.shape)
