"""Cloning decomposition: entropy-balanced random partitioning of a cloud.

A partition deals shuffled point indices round-robin onto L subsets, which
makes the subsets disjoint, union-complete and size-balanced by
construction.  Subset entropies are estimated with the Kozachenko-Leonenko
nearest-neighbor estimator; if they spread more than the tolerance the
shuffle is retried with a derived sub-seed, and the best attempt is
returned (flagged) when no attempt lands inside the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

DEFAULT_TOL_NATS = 0.2
DEFAULT_MAX_RETRIES = 8
_MIN_ENTROPY_POINTS = 8


@dataclass
class Partition:
    assignment: np.ndarray  # (M,) subset id per point, in [0, L)
    levels: int
    seed: int
    subset_entropies: np.ndarray  # (L,) nats; NaN when subsets too small to estimate
    within_tolerance: bool = True

    def subsets(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == l) for l in range(self.levels)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.levels)

    @property
    def entropy_gap(self) -> float:
        h = self.subset_entropies
        if np.isnan(h).any():
            return float("nan")
        return float(h.max() - h.min())


def entropy_knn(points: np.ndarray, k: int = 1) -> float:
    """Kozachenko-Leonenko differential entropy estimate in nats.

    Uses k-th nearest-neighbor Euclidean distances.  Zero distances
    (duplicate points) are dropped from the log average; a cloud whose
    neighbor distances are all zero has no defined estimate.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("expected an N x d point matrix")
    n, d = points.shape
    if n < _MIN_ENTROPY_POINTS:
        raise ValueError(f"need at least {_MIN_ENTROPY_POINTS} points, got {n}")
    dist, _ = cKDTree(points).query(points, k=k + 1)
    radii = dist[:, k]
    positive = radii[radii > 0]
    if positive.size == 0:
        raise ValueError("degenerate cloud: all nearest-neighbor distances are zero")
    log_ball = (d / 2.0) * np.log(np.pi) - gammaln(d / 2.0 + 1.0)  # log volume of the unit d-ball
    return float(digamma(n) - digamma(k) + log_ball + d * np.mean(np.log(positive)))


def entropy_hist(points: np.ndarray, bins_per_axis: int = 8) -> float:
    """Voxel-histogram differential entropy in nats (cross-check estimator).

    Shannon entropy of voxel occupancy over the cloud's bounding cube plus
    the log voxel volume.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("expected an N x d point matrix")
    if points.shape[0] < 1:
        raise ValueError("empty cloud")
    if bins_per_axis < 2:
        raise ValueError("need at least 2 bins per axis")
    n, d = points.shape
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = (lo + hi) / 2.0
    side = max(float((hi - lo).max()), 1e-12)
    edges = [np.linspace(center[a] - side / 2.0, center[a] + side / 2.0, bins_per_axis + 1) for a in range(d)]
    counts, _ = np.histogramdd(points, bins=edges)
    p = counts.reshape(-1) / n
    p = p[p > 0]
    voxel_volume = (side / bins_per_axis) ** d
    return float(-(p * np.log(p)).sum() + np.log(voxel_volume))


def clone_partition(
    cloud,
    levels: int,
    seed: int,
    tol_nats: float = DEFAULT_TOL_NATS,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> Partition:
    """Split a cloud into `levels` disjoint, size- and entropy-balanced subsets."""
    points = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    m = points.shape[0]
    if levels < 1:
        raise ValueError("levels must be at least 1")
    if tol_nats <= 0:
        raise ValueError("tol_nats must be positive")
    if m < 2 * levels:
        raise ValueError(f"insufficient points: need at least {2 * levels} for {levels} levels, got {m}")

    streams = np.random.SeedSequence(seed).spawn(max_retries + 1)
    best: Partition | None = None
    best_gap = np.inf
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng(streams[attempt])
        order = rng.permutation(m)
        assignment = np.empty(m, dtype=np.int64)
        assignment[order] = np.arange(m) % levels

        smallest = m // levels  # round-robin sizes differ by at most one
        if levels == 1 or smallest < _MIN_ENTROPY_POINTS:
            entropies = (
                np.array([entropy_knn(points)]) if levels == 1 and m >= _MIN_ENTROPY_POINTS
                else np.full(levels, np.nan)
            )
            return Partition(assignment, levels, seed, entropies, within_tolerance=True)

        entropies = np.array([entropy_knn(points[assignment == l]) for l in range(levels)])
        gap = float(entropies.max() - entropies.min())
        candidate = Partition(assignment, levels, seed, entropies, within_tolerance=gap <= tol_nats)
        if candidate.within_tolerance:
            return candidate
        if gap < best_gap:
            best, best_gap = candidate, gap
    assert best is not None
    return best
