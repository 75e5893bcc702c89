"""Seeded k-means used by both the residual quantizer and the analysis toolkit.

Deterministic by construction: k-means++ init from an explicit seed, a fixed
Lloyd iteration budget, argmin ties resolved to the lowest index, and empty
clusters repaired by splitting the largest cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError

LLOYD_ITERATIONS = 25


@dataclass
class KMeansResult:
    centroids: np.ndarray   # [k, d]
    assignments: np.ndarray  # [n] int32
    mse: float               # mean squared distance to assigned centroid


def _pairwise_sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clip tiny negatives from cancellation
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ centers.T)
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)

def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with chosen centers; callers
            # guarantee >= k distinct points, so this only happens mid-init.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _repair_empty(x: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> np.ndarray:
    """Reseat each empty cluster on the farthest point of the largest cluster."""
    k = centers.shape[0]
    counts = np.bincount(assign, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        largest = int(np.argmax(counts))  # lowest index on ties
        members = np.flatnonzero(assign == largest)
        d2 = ((x[members] - centers[largest]) ** 2).sum(axis=1)
        far = members[int(np.argmax(d2))]
        centers[empty] = x[far]
        assign[far] = empty
        counts[largest] -= 1
        counts[empty] = 1
    return centers


def kmeans_fit(x: np.ndarray, k: int, seed: int, iterations: int = LLOYD_ITERATIONS) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected a 2-d point matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("non-finite entries in k-means input")
    if k < 1:
        raise DegenerateInputError(f"k must be >= 1, got {k}")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < k:
        raise DegenerateInputError(f"need at least k={k} distinct points, found {n_distinct}")

    rng = np.random.default_rng(seed)
    centers = _plusplus_init(x, k, rng)
    assign = np.empty(x.shape[0], dtype=np.int32)
    for _ in range(iterations):
        d2 = _pairwise_sq_dists(x, centers)
        assign = d2.argmin(axis=1).astype(np.int32)
        centers = _repair_empty(x, centers, assign)
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
    d2 = _pairwise_sq_dists(x, centers)
    assign = d2.argmin(axis=1).astype(np.int32)
    centers = _repair_empty(x, centers, assign)
    mse = float(_pairwise_sq_dists(x, centers)[np.arange(x.shape[0]), assign].mean())
    return KMeansResult(centroids=centers, assignments=assign, mse=mse)


def assign_nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-centroid assignment; argmin ties go to the lowest index."""
    return _pairwise_sq_dists(np.asarray(x, dtype=np.float64), centers).argmin(axis=1).astype(np.int32)
