"""Stage-addressed artifact files: names, readers/writers, and the
advisory per-directory lock.

All writers are deterministic (sorted JSON keys, repr-formatted floats,
no timestamps) so re-running a stage with identical inputs overwrites
with byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .cluster import ClusterModel, RetainedClustering
from .corpus import Query, QueryPool
from .embed import EmbeddingMatrix

POOL = "pool.jsonl"
EMBEDDINGS_BIN = "embeddings.bin"
EMBEDDINGS_META = "embeddings.meta.json"
CLUSTERING = "clustering.json"
CENTROIDS_BIN = "centroids.bin"
CENTROIDS_META = "centroids.meta.json"
ASSIGNMENTS = "assignments.csv"
GENERATED = "generated.jsonl"
GENERATION_REPORT = "generation_report.json"
METRICS_DIR = "metrics"
RESOLVED_CONFIG = "resolved_config.json"
FIDELITY = "fidelity.csv"
SIMULATION_REPORT = "simulation_report.json"
LOCK_FILE = ".lock"


class ArtifactMissingError(FileNotFoundError):
    """A required prior-stage artifact is absent."""


class ArtifactDirBusyError(RuntimeError):
    """Another command holds the artifact directory lock."""


def require_artifact(artifact_dir: Path, name: str) -> Path:
    path = artifact_dir / name
    if not path.exists():
        raise ArtifactMissingError(
            f"missing artifact {path}; run the stage that produces it first"
        )
    return path


def artifact_lock(artifact_dir: Path) -> FileLock:
    return FileLock(str(artifact_dir / LOCK_FILE))


def acquire_lock(artifact_dir: Path) -> FileLock:
    lock = artifact_lock(artifact_dir)
    try:
        lock.acquire(timeout=0.5)
    except Timeout:
        raise ArtifactDirBusyError(
            f"artifact directory {artifact_dir} is locked by another command"
        ) from None
    return lock


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _format_cell(value) -> str:
    if isinstance(value, float):  # covers numpy float scalars too
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def pool_to_rows(pool: QueryPool) -> list[dict]:
    return [
        {"id": q.id, "text": q.text, "source": q.source, "cluster_id": q.cluster_id}
        for q in pool
    ]


def rows_to_pool(rows: list[dict]) -> QueryPool:
    return QueryPool(
        [
            Query(
                id=int(r["id"]),
                text=str(r["text"]),
                source=str(r.get("source", "original")),
                cluster_id=None if r.get("cluster_id") is None else int(r["cluster_id"]),
            )
            for r in rows
        ]
    )


def write_clustering(
    artifact_dir: Path, model: ClusterModel, retained: RetainedClustering
) -> None:
    doc = {
        "config": {
            "k": model.k,
            "seed": model.config.seed,
            "minibatch_size": model.minibatch_size,
            "max_iterations": model.config.max_iterations,
            "min_cluster_size": retained.min_size,
        },
        "inertia": model.inertia,
        "sizes": model.sizes.tolist(),
        "retained": {
            "old_to_new": {str(old): new for old, new in retained.old_to_new.items()},
            "sizes": retained.sizes.tolist(),
            "kept_queries": int(retained.assignments.shape[0]),
            "dropped_queries": int(model.assignments.shape[0] - retained.assignments.shape[0]),
        },
    }
    write_json(artifact_dir / CLUSTERING, doc)
    from .embed import save_matrix  # centroid matrix persisted in the embed format

    save_matrix(
        EmbeddingMatrix(model.centroids),
        artifact_dir / CENTROIDS_BIN,
        artifact_dir / CENTROIDS_META,
        seed=model.config.seed,
        backend="centroids",
    )
    write_csv(
        artifact_dir / ASSIGNMENTS,
        ["query_id", "cluster_id"],
        [
            (int(qid), int(lab))
            for qid, lab in zip(retained.query_ids, retained.assignments)
        ],
    )


def load_retained(artifact_dir: Path, pool: QueryPool) -> RetainedClustering:
    """Rebuild the retained clustering from stage artifacts."""
    from .embed import load_matrix

    doc = read_json(require_artifact(artifact_dir, CLUSTERING))
    centroids_matrix, _ = load_matrix(
        require_artifact(artifact_dir, CENTROIDS_BIN),
        require_artifact(artifact_dir, CENTROIDS_META),
    )
    assignment_rows: dict[int, int] = {}
    with open(require_artifact(artifact_dir, ASSIGNMENTS), encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            assignment_rows[int(row["query_id"])] = int(row["cluster_id"])

    old_to_new = {int(k): int(v) for k, v in doc["retained"]["old_to_new"].items()}
    retained_old = sorted(old_to_new, key=old_to_new.get)

    surviving = [
        (pos, q, assignment_rows[q.id])
        for pos, q in enumerate(pool.queries)
        if q.id in assignment_rows
    ]
    labels = np.array([lab for _, _, lab in surviving], dtype=np.int64)
    return RetainedClustering(
        old_to_new=old_to_new,
        min_size=int(doc["config"]["min_cluster_size"]),
        pool=QueryPool([q for _, q, _ in surviving]).with_cluster_ids(labels),
        assignments=labels,
        query_ids=np.array([q.id for _, q, _ in surviving], dtype=np.int64),
        positions=np.array([pos for pos, _, _ in surviving], dtype=np.int64),
        centroids=centroids_matrix.data[retained_old],
        sizes=np.array(doc["retained"]["sizes"], dtype=np.int64),
        retained_ids=sorted(old_to_new.values()),
    )
