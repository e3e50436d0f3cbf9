"""Mini-batch k-means over the embedded query pool, plus small-cluster filtering.

The fit is single-threaded and fully deterministic given (X, config):
k-means++ seeding over a seeded sample, then classic mini-batch updates
with per-centroid learning rate 1/count, then one full assignment pass.
Ties in nearest-centroid assignment break toward the lowest centroid
index everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import QueryPool
from .embed import EmbeddingMatrix
from ._seeds import rng_from


class EmptyClusteringError(RuntimeError):
    """Every cluster fell below the size threshold; nothing survives."""


@dataclass
class ClusteringConfig:
    k: int
    seed: int = 42
    minibatch_size: int | None = None  # None -> min(1000, max(1, n // 10))
    max_iterations: int = 100
    min_cluster_size: int = 5
    tol: float = 1e-6  # per-step max centroid movement for early stop

    def resolved_minibatch(self, n: int) -> int:
        if self.minibatch_size is None or self.minibatch_size <= 0:
            return min(1000, max(1, n // 10))
        return min(self.minibatch_size, n)  # clamped to the pool size at fit time


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, dim)
    assignments: np.ndarray  # (n,) int
    sizes: np.ndarray  # (k,) int
    inertia: float
    config: ClusteringConfig
    minibatch_size: int  # resolved value actually used


@dataclass
class RetainedClustering:
    """Surviving clusters after the min-size filter, re-indexed 0..K'-1."""

    old_to_new: dict[int, int]
    min_size: int
    pool: QueryPool  # surviving queries, original ids, cluster_id = new label
    assignments: np.ndarray  # (n',) new labels aligned with pool order
    query_ids: np.ndarray  # (n',) original pool ids of survivors
    positions: np.ndarray  # (n',) row positions of survivors in the input pool/matrix
    centroids: np.ndarray  # (K', dim) centroids of retained clusters
    sizes: np.ndarray  # (K',) retained cluster sizes
    retained_ids: list[int] = field(default_factory=list)  # contiguous 0..K'-1

    @property
    def num_clusters(self) -> int:
        return len(self.old_to_new)

    def cluster_texts(self, new_id: int) -> list[str]:
        return [q.text for q, lab in zip(self.pool.queries, self.assignments) if lab == new_id]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances via the expansion identity."""
    p2 = np.sum(points**2, axis=1)[:, None]
    c2 = np.sum(centroids**2, axis=1)[None, :]
    return p2 + c2 - 2.0 * points @ centroids.T


def assign(X: EmbeddingMatrix | np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels; ties break to the lowest centroid index."""
    data = X.data if isinstance(X, EmbeddingMatrix) else np.asarray(X, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if data.shape[1] != centroids.shape[1]:
        raise ValueError(
            f"dimension mismatch: points are {data.shape[1]}-d, centroids are "
            f"{centroids.shape[1]}-d"
        )
    return np.argmin(_squared_distances(data, centroids), axis=1)


def inertia_of(data: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diffs = data - centroids[labels]
    return float(np.sum(diffs * diffs))


def _kmeans_plusplus(sample: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ over the given sample."""
    n = sample.shape[0]
    centroids = np.empty((k, sample.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = sample[first]
    dist_sq = np.sum((sample - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(dist_sq.sum())
        if total <= 0.0:
            idx = int(rng.integers(0, n))  # all remaining points coincide
        else:
            idx = int(rng.choice(n, p=dist_sq / total))
        centroids[i] = sample[idx]
        dist_sq = np.minimum(dist_sq, np.sum((sample - centroids[i]) ** 2, axis=1))
    return centroids


def minibatch_kmeans(X: EmbeddingMatrix, config: ClusteringConfig) -> ClusterModel:
    """Fit mini-batch k-means.

    Parameters
    ----------
    X : EmbeddingMatrix
        Row-unit-norm data, one row per query.
    config : ClusteringConfig
        k, seed, minibatch size (None resolves to min(1000, n // 10)),
        iteration cap, and early-stop tolerance.

    Returns
    -------
    ClusterModel with centroids, a final full-pass assignment (so labels
    are exactly nearest-centroid), per-cluster sizes, and inertia.
    """
    data = X.data
    n = data.shape[0]
    if config.k < 1:
        raise ValueError("k must be >= 1")
    if n < config.k:
        raise ValueError(f"cannot fit {config.k} clusters on {n} points")
    if not np.all(np.isfinite(data)):
        raise ValueError("input matrix contains non-finite values")

    rng = rng_from(config.seed, "minibatch-kmeans")
    batch_size = config.resolved_minibatch(n)

    # k-means++ over a seeded sample (whole pool when small).
    init_size = min(n, max(3 * config.k, 3 * batch_size))
    sample_idx = rng.choice(n, size=init_size, replace=False)
    centroids = _kmeans_plusplus(data[sample_idx], config.k, rng)

    counts = np.zeros(config.k, dtype=np.int64)
    for _ in range(config.max_iterations):
        idx = rng.choice(n, size=batch_size, replace=False)
        batch = data[idx]
        labels = np.argmin(_squared_distances(batch, centroids), axis=1)
        previous = centroids.copy()
        for row, c in zip(batch, labels):
            counts[c] += 1
            eta = 1.0 / counts[c]
            centroids[c] += eta * (row - centroids[c])
        movement = float(np.sqrt(((centroids - previous) ** 2).sum(axis=1)).max())
        if movement < config.tol:
            break

    assignments = assign(data, centroids)
    sizes = np.bincount(assignments, minlength=config.k)
    return ClusterModel(
        k=config.k,
        centroids=centroids,
        assignments=assignments,
        sizes=sizes,
        inertia=inertia_of(data, centroids, assignments),
        config=config,
        minibatch_size=batch_size,
    )


def filter_small_clusters(
    model: ClusterModel, pool: QueryPool, min_size: int
) -> RetainedClustering:
    """Drop clusters smaller than min_size together with their queries.

    Survivors are re-indexed contiguously in ascending original-id order;
    surviving queries keep their original ids and get the new cluster id.
    """
    if len(pool) != model.assignments.shape[0]:
        raise ValueError("model assignments do not cover the pool")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")

    retained_old = [c for c in range(model.k) if model.sizes[c] >= min_size]
    if not retained_old:
        raise EmptyClusteringError(
            f"all {model.k} clusters fall below min_size={min_size}; nothing retained"
        )
    old_to_new = {old: new for new, old in enumerate(retained_old)}

    surviving = [
        (i, q, old_to_new[int(lab)])
        for i, (q, lab) in enumerate(zip(pool.queries, model.assignments))
        if int(lab) in old_to_new
    ]
    new_labels = np.array([lab for _, _, lab in surviving], dtype=np.int64)
    query_ids = np.array([q.id for _, q, _ in surviving], dtype=np.int64)
    positions = np.array([i for i, _, _ in surviving], dtype=np.int64)
    sub_pool = QueryPool([q for _, q, _ in surviving]).with_cluster_ids(new_labels)

    return RetainedClustering(
        old_to_new=old_to_new,
        min_size=min_size,
        pool=sub_pool,
        assignments=new_labels,
        query_ids=query_ids,
        positions=positions,
        centroids=model.centroids[retained_old].copy(),
        sizes=model.sizes[retained_old].copy(),
        retained_ids=list(range(len(retained_old))),
    )
