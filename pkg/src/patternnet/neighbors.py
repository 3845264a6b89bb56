"""Similarity measures and exact k-nearest-neighbor graph construction.

Two measures are supported as squared-distance-like sort keys:

* ``euclidean``  squared Euclidean distance
* ``hilbert``    2 * (1 - cos(X, Y)), the squared chord length between the
  unit-normalized vectors; positive-scale invariant, range [0, 4]

Rows of a neighbor index are sorted by ascending distance with ties broken
by ascending point id, and never contain the query point itself.  The
kd-tree path (Euclidean only) recomputes candidate distances with the same
formula as the brute-force path and falls back to brute force for any row
with an exact distance tie at the K-th position, so the two paths agree
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

NORM_FLOOR = 1e-12
METRICS = ("euclidean", "hilbert")


@dataclass
class NeighborIndex:
    indices: np.ndarray  # (N, K) point ids
    metric: str
    k: int


def euclidean_sq(x, y) -> float:
    """Squared Euclidean distance via the inner-product expansion."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    value = float(x @ x + y @ y - 2.0 * (x @ y))
    return max(value, 0.0)


def hilbert_dist(x, y, strict: bool = False) -> float:
    """Scale-invariant kernel distance 2 * (1 - cos(X, Y)) in [0, 4].

    Norms below NORM_FLOOR are floored; in strict mode they raise instead.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if strict and (nx < NORM_FLOOR or ny < NORM_FLOOR):
        raise ValueError("zero vector has no direction under the scale-invariant kernel")
    value = 2.0 * (1.0 - float((x / max(nx, NORM_FLOOR)) @ (y / max(ny, NORM_FLOOR))))
    return min(max(value, 0.0), 4.0)


def unit_rows(features: np.ndarray) -> np.ndarray:
    """Normalize rows to unit length, flooring tiny norms."""
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.maximum(norms, NORM_FLOOR)


def _pairwise_sq(features: np.ndarray) -> np.ndarray:
    """Full matrix of squared Euclidean distances.

    cdist evaluates every pair independently with the same accumulation
    order, so subset queries (`_row_sq`) reproduce these entries bitwise,
    and duplicate points give exact ties.
    """
    return cdist(features, features, "sqeuclidean")


def _row_sq(features: np.ndarray, i: int, candidates: np.ndarray) -> np.ndarray:
    return cdist(features[candidates], features[i : i + 1], "sqeuclidean").ravel()


def _brute_rows(features: np.ndarray, k: int, rows: np.ndarray | None = None) -> np.ndarray:
    dist = _pairwise_sq(features if rows is None else features)
    if rows is not None:
        dist = dist[rows]
        np.put_along_axis(dist, rows[:, None], np.inf, axis=1)
    else:
        np.fill_diagonal(dist, np.inf)
    # stable argsort on distance == (distance, id) lexicographic order
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def _tree_knn(features: np.ndarray, k: int) -> np.ndarray:
    n = features.shape[0]
    tree = cKDTree(features)
    query_k = min(n, k + 2)  # self + K + one extra to detect boundary ties
    _, raw = tree.query(features, k=query_k)
    out = np.empty((n, k), dtype=np.int64)
    fallback = []
    for i in range(n):
        cand = raw[i][raw[i] != i]
        if cand.size < min(k + 1, n - 1):
            # self was crowded out by zero-distance duplicates; resolve exactly
            fallback.append(i)
            continue
        d = _row_sq(features, i, cand)
        order = np.lexsort((cand, d))
        cand, d = cand[order], d[order]
        if cand.size > k and d[k] == d[k - 1]:
            fallback.append(i)  # tie across the K boundary: re-rank the full row
            continue
        out[i] = cand[:k]
    if fallback:
        rows = np.asarray(fallback)
        out[rows] = _brute_rows(features, k, rows)
    return out


def knn(features: np.ndarray, k: int, metric: str = "euclidean", method: str = "auto") -> NeighborIndex:
    """Exact K-nearest-neighbor index under the chosen measure.

    The hilbert metric unit-normalizes the rows and reuses the Euclidean
    machinery (the kernel equals the squared chordal distance).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("expected an N x F feature matrix")
    n = features.shape[0]
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < N, got K={k}, N={n}")
    if method not in ("auto", "brute", "tree"):
        raise ValueError(f"unknown method {method!r}")

    keys = unit_rows(features) if metric == "hilbert" else features
    if method == "tree" or (method == "auto" and n >= 256 and features.shape[1] <= 16):
        indices = _tree_knn(keys, k)
    else:
        indices = _brute_rows(keys, k)
    return NeighborIndex(indices=indices, metric=metric, k=k)
