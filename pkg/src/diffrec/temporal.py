"""Time-aware linear reweighting of interaction histories.

The m-th of M interactions (oldest first) gets weight
``w_min + (m-1)/(M-1) * (w_max - w_min)``; a lone interaction gets ``w_max``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionMatrix
from .errors import ConfigError, DataError


def _check_bounds(w_min: float, w_max: float) -> None:
    if not 0.0 < w_min <= w_max <= 1.0:
        raise ConfigError(f"need 0 < w_min <= w_max <= 1, got {w_min}, {w_max}")


def position_weights(m: int, w_min: float, w_max: float) -> np.ndarray:
    if m == 1:
        return np.array([w_max])
    return w_min + np.arange(m) / (m - 1) * (w_max - w_min)


@dataclass
class WeightedHistory:
    vector: np.ndarray
    sequence: np.ndarray
    weights: np.ndarray

    @property
    def length(self) -> int:
        return len(self.sequence)


def reweight(seq, item_count: int, w_min: float = 0.3, w_max: float = 1.0) -> WeightedHistory:
    _check_bounds(w_min, w_max)
    seq = np.asarray(seq, dtype=np.int64)
    if len(np.unique(seq)) != len(seq):
        raise DataError("duplicate items in interaction sequence")
    if len(seq) and (seq.min() < 0 or seq.max() >= item_count):
        raise DataError(f"item id outside 0..{item_count - 1}")
    w = position_weights(len(seq), w_min, w_max) if len(seq) else np.zeros(0)
    vec = np.zeros(item_count)
    vec[seq] = w
    return WeightedHistory(vec, seq, w)


def apply_temporal(m: InteractionMatrix, w_min: float = 0.3, w_max: float = 1.0) -> InteractionMatrix:
    """Replace every row by its reweighted history.

    Rows are stored in chronological order with ties in input order, which
    is exactly the order weights are assigned in.
    """
    _check_bounds(w_min, w_max)
    if m.nnz and np.all(m.timestamps == 0):
        raise ConfigError("temporal reweighting needs interaction timestamps")
    w = np.empty(m.nnz)
    for u in range(m.n_users):
        lo, hi = m.indptr[u], m.indptr[u + 1]
        if hi > lo:
            w[lo:hi] = position_weights(hi - lo, w_min, w_max)
    return m.with_weights(w * m.weights)
