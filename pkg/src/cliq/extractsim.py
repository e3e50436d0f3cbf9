"""Desk-scale simulation of budgeted knowledge extraction from a quantized
black-box teacher.

The world is an imbalanced mixture of latent semantic clusters on the unit
sphere: well-separated prototype directions with Zipf-distributed mass and
jittered pool queries. The teacher answers any query with the prototype of
its nearest cluster, degraded by output-grid rounding plus Gaussian noise
(both knobs standing in for quantization error). The student memorizes
query/response pairs and answers by nearest stored query, which makes the
imitation-loss minimum exact on the training set and leaves coverage as
the only mechanism by which a query strategy can win.

INT8-like / INT4-like noise levels below are conventions for ordering
experiments, not calibrated values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import ClusteringConfig, EmptyClusteringError, filter_small_clusters, minibatch_kmeans
from .corpus import SOURCE_ORIGINAL, Query, QueryPool
from .embed import EmbeddingMatrix
from ._seeds import rng_from, stable_seed

STRATEGY_RANDOM = "random_uniform"
STRATEGY_CLIQ = "cliq_uniform"

# (quant_step, noise_sigma) stand-ins for quantization levels.
INT8_LIKE = (0.05, 0.02)
INT4_LIKE = (0.10, 0.05)


class SeparationError(RuntimeError):
    """Could not place prototypes with the required pairwise separation."""


@dataclass
class SimWorld:
    k_true: int
    dim: int
    prototypes: np.ndarray  # (k_true, dim) unit rows
    cluster_mass: np.ndarray  # (k_true,) sums to 1
    pool: QueryPool  # synthetic queries with ground-truth cluster ids
    embeddings: np.ndarray  # (pool_size, dim) unit rows
    labels: np.ndarray  # (pool_size,) ground-truth cluster per query
    seed: int
    max_prototype_cos: float  # separation actually achieved at generation


@dataclass
class QuantizedTeacher:
    world: SimWorld
    noise_sigma: float = 0.0
    quant_step: float = 0.0  # 0 = full precision


@dataclass
class StudentModel:
    """Memorizing student: answers with the response of the nearest
    (by cosine) stored query; empty memory answers the zero vector."""

    memory_queries: np.ndarray | None = None  # (m, dim)
    memory_responses: np.ndarray | None = None  # (m, dim)

    @property
    def size(self) -> int:
        return 0 if self.memory_queries is None else self.memory_queries.shape[0]

    def respond(self, x: np.ndarray) -> np.ndarray:
        return self.respond_batch(np.asarray(x, dtype=np.float64)[None, :])[0]

    def respond_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.memory_queries is None:
            return np.zeros_like(X)
        sims = X @ self.memory_queries.T
        nearest = np.argmax(sims, axis=1)  # ties -> lowest stored index
        return self.memory_responses[nearest]


def make_world(
    k_true: int,
    dim: int,
    pool_size: int,
    zipf_s: float,
    seed: int,
    *,
    jitter_scale: float = 0.1,
    max_separation_cos: float = 0.5,
    max_attempts: int = 1000,
) -> SimWorld:
    """Build a synthetic world with Zipf cluster mass k^(-zipf_s).

    Prototypes are seeded random unit vectors, resampled until each new
    one has cosine < max_separation_cos against all previous; pool
    queries are normalize(prototype + jitter_scale * gaussian).
    """
    if k_true < 2:
        raise ValueError("k_true must be >= 2")
    if pool_size < k_true:
        raise ValueError("pool_size must be >= k_true")
    rng = rng_from(seed, "sim-world")

    prototypes = np.empty((k_true, dim), dtype=np.float64)
    max_cos = -1.0
    for k in range(k_true):
        for attempt in range(max_attempts):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if k == 0:
                prototypes[0] = v
                break
            cos = float((prototypes[:k] @ v).max())
            if cos < max_separation_cos:
                prototypes[k] = v
                max_cos = max(max_cos, cos)
                break
        else:
            raise SeparationError(
                f"could not place prototype {k} with pairwise cosine < "
                f"{max_separation_cos} in {max_attempts} attempts (dim={dim} too small?)"
            )

    ranks = np.arange(1, k_true + 1, dtype=np.float64)
    mass = ranks ** (-zipf_s)
    mass /= mass.sum()

    labels = rng.choice(k_true, size=pool_size, p=mass)
    jitter = jitter_scale * rng.normal(size=(pool_size, dim))
    points = prototypes[labels] + jitter
    points /= np.linalg.norm(points, axis=1)[:, None]

    queries = [
        Query(id=i, text=f"sim-query-{i}", source=SOURCE_ORIGINAL, cluster_id=int(labels[i]))
        for i in range(pool_size)
    ]
    return SimWorld(
        k_true=k_true,
        dim=dim,
        prototypes=prototypes,
        cluster_mass=mass,
        pool=QueryPool(queries),
        embeddings=points,
        labels=labels.astype(np.int64),
        seed=seed,
        max_prototype_cos=max_cos,
    )


def teacher_full_response(world: SimWorld, x: np.ndarray) -> np.ndarray:
    """Noiseless behavior: the prototype of the nearest cluster."""
    x = np.asarray(x, dtype=np.float64)
    nearest = int(np.argmax(world.prototypes @ x))
    return world.prototypes[nearest].copy()


def teacher_respond(teacher: QuantizedTeacher, x: np.ndarray, seed: int) -> np.ndarray:
    """Quantized response: grid-rounded full response plus Gaussian noise.

    The noise stream is seeded from (seed, bytes of x), so repeated
    queries of the same x always return the same answer.
    """
    x = np.asarray(x, dtype=np.float64)
    response = teacher_full_response(teacher.world, x)
    if teacher.quant_step > 0.0:
        response = np.round(response / teacher.quant_step) * teacher.quant_step
    if teacher.noise_sigma > 0.0:
        rng = rng_from(seed, "teacher-noise", x.tobytes())
        response = response + teacher.noise_sigma * rng.normal(size=response.shape)
    return response


def train_student(pairs: list[tuple[np.ndarray, np.ndarray]]) -> StudentModel:
    """Memorize query/response pairs; imitation loss on them is exactly 0."""
    if not pairs:
        return StudentModel()
    queries = np.vstack([np.asarray(q, dtype=np.float64) for q, _ in pairs])
    responses = np.vstack([np.asarray(r, dtype=np.float64) for _, r in pairs])
    return StudentModel(memory_queries=queries, memory_responses=responses)


def kd_loss(student: StudentModel, queries: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared-error imitation loss of the student on (query, target) pairs."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if queries.shape[0] == 0:
        raise ValueError("cannot evaluate imitation loss on zero pairs")
    diffs = student.respond_batch(queries) - targets
    return float(np.mean(np.sum(diffs * diffs, axis=1)))


def probe_grid(world: SimWorld, *, jittered_per_cluster: int = 5,
               jitter_scale: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Held-out probes: each prototype plus jittered copies, fixed per world seed."""
    rng = rng_from(world.seed, "probe-grid")
    probes = [world.prototypes]
    labels = [np.arange(world.k_true)]
    for _ in range(jittered_per_cluster):
        jitter = jitter_scale * rng.normal(size=(world.k_true, world.dim))
        pts = world.prototypes + jitter
        pts /= np.linalg.norm(pts, axis=1)[:, None]
        probes.append(pts)
        labels.append(np.arange(world.k_true))
    return np.vstack(probes), np.concatenate(labels)


def fidelity(student: StudentModel, probes: np.ndarray, world: SimWorld) -> float:
    """Mean cosine between student responses and the noiseless teacher."""
    probes = np.asarray(probes, dtype=np.float64)
    responses = student.respond_batch(probes)
    targets = probes @ world.prototypes.T
    target_vecs = world.prototypes[np.argmax(targets, axis=1)]
    cosines = np.empty(probes.shape[0], dtype=np.float64)
    for i in range(probes.shape[0]):
        resp, tgt = responses[i], target_vecs[i]
        if np.array_equal(resp, tgt):
            cosines[i] = 1.0
            continue
        denom = float(np.linalg.norm(resp) * np.linalg.norm(tgt))
        cosines[i] = float(np.clip(resp @ tgt / denom, -1.0, 1.0)) if denom > 0 else 0.0
    return float(np.mean(cosines))


@dataclass
class FidelityRow:
    strategy: str
    budget: int
    noise_sigma: float
    quant_step: float
    mean_fidelity: float
    std_fidelity: float
    trials: int


@dataclass
class FidelityTable:
    rows: list[FidelityRow] = field(default_factory=list)
    mismatches: list[str] = field(default_factory=list)
    cliq_budget: int | None = None  # K' * m_per_cluster of the fitted clustering

    def mean_for(self, strategy: str, budget: int) -> float:
        for row in self.rows:
            if row.strategy == strategy and row.budget == budget:
                return row.mean_fidelity
        raise KeyError(f"no row for ({strategy}, {budget})")


def _cliq_selection(world: SimWorld, m_per_cluster: int, seed: int):
    """Cluster the pool and pick m queries nearest each retained centroid.

    Returns (selected pool indices, retained clustering)."""
    config = ClusteringConfig(
        k=world.k_true,
        seed=stable_seed(seed, "cliq-clustering"),
        min_cluster_size=m_per_cluster,
    )
    model = minibatch_kmeans(EmbeddingMatrix(world.embeddings), config)
    retained = filter_small_clusters(model, world.pool, m_per_cluster)
    chosen: list[int] = []
    for k in range(retained.num_clusters):
        members = retained.positions[retained.assignments == k]
        dists = np.sum(
            (world.embeddings[members] - retained.centroids[k]) ** 2, axis=1
        )
        order = np.argsort(dists, kind="stable")[:m_per_cluster]
        chosen.extend(int(members[i]) for i in order)
    return np.array(sorted(chosen), dtype=np.int64), retained


def run_budget_experiment(
    world: SimWorld,
    teacher: QuantizedTeacher,
    strategies: list[str],
    budgets: list[int],
    m_per_cluster: int,
    trials: int,
    seed: int,
) -> FidelityTable:
    """Score strategies by student fidelity on the held-out probe grid.

    random_uniform draws per-trial permutation prefixes of the pool;
    cliq_uniform clusters the pool once (seed derived from the experiment
    seed) and selects m_per_cluster queries per retained cluster nearest
    its centroid; its budget is fixed at K'*m_per_cluster, and requested
    budgets that do not match are reported, never silently adjusted.
    Teacher noise is seeded per query from the experiment seed, so every
    strategy and trial sees identical teacher behavior.
    """
    n = len(world.pool)
    budgets = sorted(int(b) for b in budgets)
    if budgets and budgets[-1] > n:
        raise ValueError(f"budget {budgets[-1]} exceeds pool size {n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    teacher_seed = stable_seed(seed, "teacher-stream")
    response_cache: dict[int, np.ndarray] = {}

    def responses_for(indices: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        pairs = []
        for idx in indices:
            idx = int(idx)
            if idx not in response_cache:
                response_cache[idx] = teacher_respond(
                    teacher, world.embeddings[idx], teacher_seed
                )
            pairs.append((world.embeddings[idx], response_cache[idx]))
        return pairs

    probes, _ = probe_grid(world)
    table = FidelityTable()

    cliq_indices: np.ndarray | None = None
    if STRATEGY_CLIQ in strategies:
        try:
            cliq_indices, _ = _cliq_selection(world, m_per_cluster, seed)
            table.cliq_budget = int(cliq_indices.shape[0])
        except EmptyClusteringError as exc:
            table.mismatches.append(f"cliq_uniform: {exc}")

    for strategy in strategies:
        if strategy == STRATEGY_RANDOM:
            per_trial_perms = [
                rng_from(seed, "random-trial", t).permutation(n) for t in range(trials)
            ]
            for budget in budgets:
                values = []
                for perm in per_trial_perms:
                    student = train_student(responses_for(perm[:budget]))
                    values.append(fidelity(student, probes, world))
                arr = np.array(values)
                table.rows.append(
                    FidelityRow(
                        strategy=strategy,
                        budget=budget,
                        noise_sigma=teacher.noise_sigma,
                        quant_step=teacher.quant_step,
                        mean_fidelity=float(arr.mean()),
                        std_fidelity=float(arr.std(ddof=1)) if trials > 1 else 0.0,
                        trials=trials,
                    )
                )
        elif strategy == STRATEGY_CLIQ:
            if cliq_indices is None:
                continue
            student = train_student(responses_for(cliq_indices))
            value = fidelity(student, probes, world)
            for budget in budgets:
                if budget != table.cliq_budget:
                    table.mismatches.append(
                        f"cliq_uniform: requested budget {budget} != K'*m = {table.cliq_budget}"
                    )
                    continue
                table.rows.append(
                    FidelityRow(
                        strategy=strategy,
                        budget=budget,
                        noise_sigma=teacher.noise_sigma,
                        quant_step=teacher.quant_step,
                        mean_fidelity=value,
                        std_fidelity=0.0,
                        trials=trials,
                    )
                )
        else:
            raise ValueError(f"unknown strategy: {strategy!r}")
    return table


def save_fidelity_csv(table: FidelityTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["strategy", "budget", "noise_sigma", "quant_step",
             "mean_fidelity", "std_fidelity", "trials"]
        )
        for row in table.rows:
            writer.writerow(
                [row.strategy, row.budget, repr(row.noise_sigma), repr(row.quant_step),
                 repr(row.mean_fidelity), repr(row.std_fidelity), row.trials]
            )
