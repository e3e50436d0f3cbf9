"""Cluster-level diagnostics for query pools.

Hit-rate curves under budgeted selection strategies, intra-cluster
redundancy, query-to-centroid cosine distances, per-cluster allocation
histograms, and a deterministic 2-D PCA projection for plotting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import QueryPool
from .embed import EmbeddingMatrix
from ._seeds import rng_from

logger = logging.getLogger(__name__)

STRATEGY_RANDOM = "random_uniform"
STRATEGY_ROUND_ROBIN = "cliq_round_robin"


@dataclass
class HitRateCurve:
    strategy: str
    budgets: list[int]
    mean_covered: list[float]
    std_covered: list[float]
    per_trial: np.ndarray  # (trials, budgets) covered-cluster counts
    total_clusters: int
    trials: int


@dataclass
class RedundancyReport:
    per_cluster: dict[int, float]
    pooled_mean: float  # unweighted mean over included clusters; 0.0 if none
    excluded: list[int] = field(default_factory=list)  # clusters of size < 2


@dataclass
class AllocationHistogram:
    counts: dict[int, int]
    cv: float  # stddev/mean of the counts; 0.0 for empty or uniform


def hit_rate_curve(
    labels: np.ndarray,
    strategy: str,
    budgets: list[int],
    trials: int,
    seed: int,
) -> HitRateCurve:
    """Clusters covered by at least one selected query, per budget.

    random_uniform samples without replacement (per-trial permutation
    prefixes, so coverage is monotone in budget within each trial).
    cliq_round_robin picks one query per cluster in cluster-id order,
    cycling, so it deterministically covers min(B, K') clusters; trials
    are ignored for it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("empty pool")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    budgets = sorted(int(b) for b in budgets)
    if budgets and budgets[0] < 0:
        raise ValueError("budgets must be nonnegative")
    if budgets and budgets[-1] > n:
        raise ValueError(f"budget {budgets[-1]} exceeds pool size {n}")
    total_clusters = int(np.unique(labels).shape[0])

    if strategy == STRATEGY_ROUND_ROBIN:
        row = np.array([min(b, total_clusters) for b in budgets], dtype=np.int64)
        per_trial = row[None, :]
        effective_trials = 1
    elif strategy == STRATEGY_RANDOM:
        per_trial = np.zeros((trials, len(budgets)), dtype=np.int64)
        for t in range(trials):
            rng = rng_from(seed, "hit-rate-trial", t)
            perm = rng.permutation(n)
            seen: set[int] = set()
            covered_at = np.zeros(n + 1, dtype=np.int64)
            for pos, idx in enumerate(perm):
                seen.add(int(labels[idx]))
                covered_at[pos + 1] = len(seen)
            per_trial[t] = [covered_at[b] for b in budgets]
        effective_trials = trials
    else:
        raise ValueError(f"unknown strategy: {strategy!r}")

    return HitRateCurve(
        strategy=strategy,
        budgets=budgets,
        mean_covered=[float(m) for m in per_trial.mean(axis=0)],
        std_covered=[float(s) for s in per_trial.std(axis=0)],
        per_trial=per_trial,
        total_clusters=total_clusters,
        trials=effective_trials,
    )


def _mean_pairwise_cosine_exact(rows: np.ndarray) -> float:
    # For unit rows: sum_{i != j} x_i . x_j = ||sum x||^2 - s
    s = rows.shape[0]
    total = np.sum(rows, axis=0)
    off_diagonal = float(total @ total) - float(np.sum(rows * rows))
    return off_diagonal / (s * (s - 1))


def _mean_pairwise_cosine_sampled(
    rows: np.ndarray, pairs: int, rng: np.random.Generator
) -> float:
    s = rows.shape[0]
    i = rng.integers(0, s, size=pairs)
    j = rng.integers(0, s - 1, size=pairs)
    j = np.where(j >= i, j + 1, j)  # distinct index pairs
    return float(np.mean(np.sum(rows[i] * rows[j], axis=1)))


def intra_cluster_redundancy(
    X: EmbeddingMatrix,
    labels: np.ndarray,
    *,
    exact_threshold: int = 2000,
    sample_pairs: int = 10000,
    seed: int = 0,
) -> RedundancyReport:
    """Mean pairwise cosine similarity within each cluster of size >= 2.

    Exact over all pairs up to exact_threshold members; larger clusters
    use seeded sampling of sample_pairs unordered pairs. Size-1 clusters
    are listed as excluded.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if X.rows != labels.shape[0]:
        raise ValueError("embedding rows do not align with labels")
    per_cluster: dict[int, float] = {}
    excluded: list[int] = []
    for cid in sorted(np.unique(labels).tolist()):
        rows = X.data[labels == cid]
        if rows.shape[0] < 2:
            excluded.append(int(cid))
            continue
        if rows.shape[0] <= exact_threshold:
            value = _mean_pairwise_cosine_exact(rows)
        else:
            value = _mean_pairwise_cosine_sampled(
                rows, sample_pairs, rng_from(seed, "redundancy-sample", int(cid))
            )
        per_cluster[int(cid)] = float(np.clip(value, -1.0, 1.0))
    pooled = float(np.mean(list(per_cluster.values()))) if per_cluster else 0.0
    return RedundancyReport(per_cluster=per_cluster, pooled_mean=pooled, excluded=excluded)


def centroid_distance_distribution(
    X: EmbeddingMatrix, labels: np.ndarray, centroids: np.ndarray
) -> list[tuple[int, float]]:
    """Per query: cosine distance 1 - cos(x, centroid of its cluster).

    Centroids are re-normalized first; queries of a zero-norm centroid
    are skipped with a logged report.
    """
    labels = np.asarray(labels, dtype=np.int64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if X.rows != labels.shape[0]:
        raise ValueError("embedding rows do not align with labels")
    if labels.size and (labels.min() < 0 or labels.max() >= centroids.shape[0]):
        raise ValueError("labels reference centroids that do not exist")
    if X.dim != centroids.shape[1]:
        raise ValueError("embedding and centroid dimensions differ")

    norms = np.linalg.norm(centroids, axis=1)
    zero_centroids = {int(c) for c in np.nonzero(norms == 0.0)[0]}
    if zero_centroids:
        logger.warning(
            "skipping queries of zero-norm centroids %s", sorted(zero_centroids)
        )
    unit = centroids.copy()
    unit[norms > 0] /= norms[norms > 0][:, None]

    out: list[tuple[int, float]] = []
    for i in range(X.rows):
        cid = int(labels[i])
        if cid in zero_centroids:
            continue
        cos = float(np.clip(np.dot(X.data[i], unit[cid]), -1.0, 1.0))
        out.append((cid, 1.0 - cos))
    return out


def allocation_histogram(selected: QueryPool) -> AllocationHistogram:
    """Query count per cluster over a selected pool, plus the counts' CV."""
    counts: dict[int, int] = {}
    for q in selected:
        if q.cluster_id is None:
            raise ValueError(f"query {q.id} has no cluster id; cannot build histogram")
        counts[q.cluster_id] = counts.get(q.cluster_id, 0) + 1
    if not counts:
        return AllocationHistogram(counts={}, cv=0.0)
    values = np.array(sorted(counts.values()), dtype=np.float64)
    mean = float(values.mean())
    cv = float(values.std() / mean) if mean > 0 else 0.0
    return AllocationHistogram(counts=dict(sorted(counts.items())), cv=cv)


def _power_iteration(
    centered: np.ndarray,
    previous: list[np.ndarray],
    rng: np.random.Generator,
    tol: float,
    max_iterations: int,
) -> tuple[np.ndarray, float]:
    """Dominant principal direction of centered data, deflated against
    previously found directions. Returns (direction, eigenvalue of X^T X)."""
    d = centered.shape[1]
    v = rng.normal(size=d)
    for prev in previous:
        v -= (v @ prev) * prev
    norm = np.linalg.norm(v)
    if norm == 0.0:
        v = np.zeros(d)
        v[0] = 1.0
    else:
        v /= norm
    for _ in range(max_iterations):
        w = centered.T @ (centered @ v)
        for prev in previous:
            w -= (w @ prev) * prev
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w  # sign-align before measuring movement
        if float(np.linalg.norm(w - v)) < tol:
            v = w
            break
        v = w
    eigenvalue = float(np.linalg.norm(centered @ v) ** 2)
    return v, eigenvalue


def pca_project_2d(
    X: EmbeddingMatrix,
    *,
    seed: int = 0,
    tol: float = 1e-9,
    max_iterations: int = 1000,
) -> np.ndarray:
    """Project rows onto the top-2 principal directions.

    Directions come from seeded power iteration with deflation; each
    direction's first nonzero loading is made positive. Rank-deficient
    data gets a zeroed second (or both) axis with a logged report.
    """
    if X.rows < 3:
        raise ValueError("PCA projection needs at least 3 rows")
    centered = X.data - X.data.mean(axis=0)
    rng = rng_from(seed, "pca-power-iteration")

    directions: list[np.ndarray] = []
    eigenvalues: list[float] = []
    for _ in range(2):
        v, lam = _power_iteration(centered, directions, rng, tol, max_iterations)
        directions.append(v)
        eigenvalues.append(lam)

    # Zero out directions with (relatively) no variance: rank < 2 data.
    scale = max(eigenvalues[0], 1e-300)
    coords = np.zeros((X.rows, 2), dtype=np.float64)
    for axis in range(2):
        if eigenvalues[axis] <= 1e-12 * scale or eigenvalues[axis] == 0.0:
            logger.warning("data rank < %d; projection axis %d zeroed", axis + 1, axis)
            continue
        v = directions[axis]
        nonzero = np.nonzero(np.abs(v) > 1e-12)[0]
        if nonzero.size and v[nonzero[0]] < 0:
            v = -v
        coords[:, axis] = centered @ v
    return coords
