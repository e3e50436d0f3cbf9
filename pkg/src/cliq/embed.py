"""Text-to-unit-vector embedding backends and matrix persistence.

Two backends share one contract (row-unit-norm matrix aligned with input
order): a deterministic local hashing embedder for offline/test runs, and
a remote embeddings API client. Degenerate all-zero vectors map to the
first basis vector so downstream clustering never sees a zero row.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ._http import ApiError, PostFn, api_headers, post_json_with_retry

logger = logging.getLogger(__name__)

BACKEND_LOCAL = "local_hash"
BACKEND_REMOTE = "remote_api"

NORM_TOLERANCE = 1e-6


@dataclass
class EmbeddingMatrix:
    """Row-unit-norm matrix; row i corresponds to input text i."""

    data: np.ndarray  # (rows, dim) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("embedding matrix must be 2-dimensional")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def check_unit_norms(self, tol: float = NORM_TOLERANCE) -> None:
        norms = np.linalg.norm(self.data, axis=1)
        if not np.all(np.abs(norms - 1.0) <= tol):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"embedding rows are not unit-norm (max deviation {worst:g})")


@dataclass
class EmbeddingBackendConfig:
    kind: str = BACKEND_LOCAL
    dim: int = 256  # local backend only; remote dim comes from the server
    endpoint: str = ""
    model_name: str = ""
    batch_size: int = 64
    max_text_length: int = 2000
    max_concurrency: int = 4
    max_attempts: int = 5
    backoff_base: float = 1.0
    timeout: float = 60.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


def _unit_basis_row(dim: int) -> np.ndarray:
    row = np.zeros(dim, dtype=np.float64)
    row[0] = 1.0
    return row


def _features(text: str) -> list[str]:
    """Word unigrams plus character trigrams of the lowercased text."""
    t = text.lower()
    feats = [f"w\x00{w}" for w in t.split()]
    feats.extend(f"c\x00{t[i:i + 3]}" for i in range(len(t) - 2))
    return feats


def _bucket_and_sign(feature: str, dim: int, key: bytes) -> tuple[int, float]:
    enc = feature.encode("utf-8")
    hb = hashlib.blake2b(enc, key=key, person=b"cliq-bucket", digest_size=8).digest()
    hs = hashlib.blake2b(enc, key=key, person=b"cliq-sign", digest_size=1).digest()
    return int.from_bytes(hb, "little") % dim, 1.0 if hs[0] & 1 else -1.0


def embed_local(texts: list[str], dim: int, seed: int) -> EmbeddingMatrix:
    """Deterministic hashing embedder.

    Each feature (unigram or trigram) is hashed with a seed-keyed blake2b
    to a signed bucket; accumulated counts are mean-pooled over the
    feature count and l2-normalized. Texts with no features (or whose
    signed features cancel exactly) map to the first basis vector. Output
    is byte-identical across runs and platforms for fixed (texts, dim,
    seed).
    """
    if not texts:
        raise ValueError("cannot embed an empty text list")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    key = (seed % 2**64).to_bytes(8, "little")
    out = np.zeros((len(texts), dim), dtype=np.float64)
    for i, text in enumerate(texts):
        feats = _features(text)
        if not feats:
            out[i] = _unit_basis_row(dim)
            continue
        vec = np.zeros(dim, dtype=np.float64)
        for feat in feats:
            bucket, sign = _bucket_and_sign(feat, dim, key)
            vec[bucket] += sign
        vec /= len(feats)  # mean pooling
        norm = float(np.linalg.norm(vec))
        out[i] = vec / norm if norm > 0.0 else _unit_basis_row(dim)
    return EmbeddingMatrix(out)


def _embed_batch(
    batch: list[str],
    config: EmbeddingBackendConfig,
    post_fn: PostFn | None,
    sleep: Callable[[float], None],
) -> list[list[float]]:
    url = config.endpoint.rstrip("/") + "/embeddings"
    payload = {"model": config.model_name, "input": batch}
    doc = post_json_with_retry(
        url,
        payload,
        headers=api_headers(),
        timeout=config.timeout,
        max_attempts=config.max_attempts,
        backoff_base=config.backoff_base,
        post_fn=post_fn,
        sleep=sleep,
    )
    data = doc.get("data")
    if not isinstance(data, list):
        raise ApiError(f"embeddings response has no data array: {str(doc)[:200]}")
    vectors: list[list[float] | None] = [None] * len(batch)
    for pos, item in enumerate(data):
        if not isinstance(item, dict) or "embedding" not in item:
            raise ApiError(f"embeddings response item {pos} has no embedding")
        idx = item.get("index", pos)
        if not isinstance(idx, int) or not 0 <= idx < len(batch):
            raise ApiError(f"embeddings response item {pos} has invalid index {idx!r}")
        vectors[idx] = item["embedding"]
    missing = [i for i, v in enumerate(vectors) if v is None]
    if missing:
        raise ApiError(f"embeddings response is missing vectors for indices {missing}")
    return vectors  # type: ignore[return-value]


def embed_remote(
    texts: list[str],
    config: EmbeddingBackendConfig,
    *,
    post_fn: PostFn | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> EmbeddingMatrix:
    """Embed via an OpenAI-compatible /embeddings endpoint.

    Texts are truncated to config.max_text_length characters, sent in
    batches of config.batch_size (up to config.max_concurrency in
    flight), and reassembled by batch index, so completion order never
    affects the output. Returned vectors are re-normalized; zero vectors
    map to the first basis vector with a logged warning.
    """
    if not texts:
        raise ValueError("cannot embed an empty text list")
    if not config.endpoint:
        raise ValueError("remote embedding backend requires an endpoint")
    truncated = [t[: config.max_text_length] for t in texts]
    batches = [
        truncated[i : i + config.batch_size]
        for i in range(0, len(truncated), config.batch_size)
    ]

    with ThreadPoolExecutor(max_workers=max(1, config.max_concurrency)) as pool:
        futures = [pool.submit(_embed_batch, b, config, post_fn, sleep) for b in batches]
        results = [f.result() for f in futures]  # batch-index order by construction

    dim: int | None = None
    rows: list[np.ndarray] = []
    for batch_idx, vectors in enumerate(results):
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise ApiError("embeddings response vector is not 1-dimensional")
            if dim is None:
                dim = int(arr.shape[0])
                if dim < 2:
                    raise ApiError(f"server returned embeddings of dim {dim} (< 2)")
            elif arr.shape[0] != dim:
                raise ApiError(
                    f"embedding dimension mismatch across batches: batch {batch_idx} "
                    f"returned dim {arr.shape[0]}, expected {dim}"
                )
            norm = float(np.linalg.norm(arr))
            if norm > 0.0:
                rows.append(arr / norm)
            else:
                logger.warning("server returned an all-zero embedding; using basis vector e1")
                rows.append(_unit_basis_row(dim))
    return EmbeddingMatrix(np.vstack(rows))


def embed_texts(texts: list[str], config: EmbeddingBackendConfig, seed: int) -> EmbeddingMatrix:
    """Dispatch to the configured backend."""
    if config.kind == BACKEND_LOCAL:
        return embed_local(texts, config.dim, seed)
    if config.kind == BACKEND_REMOTE:
        return embed_remote(texts, config)
    raise ValueError(f"unknown embedding backend kind: {config.kind!r}")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def save_matrix(
    matrix: EmbeddingMatrix,
    bin_path: str | Path,
    meta_path: str | Path,
    *,
    seed: int | None,
    backend: str,
) -> None:
    """Write little-endian float32 row-major bytes plus a JSON sidecar."""
    Path(bin_path).write_bytes(matrix.data.astype("<f4").tobytes(order="C"))
    meta = {"rows": matrix.rows, "dim": matrix.dim, "seed": seed, "backend": backend}
    Path(meta_path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_matrix(bin_path: str | Path, meta_path: str | Path) -> tuple[EmbeddingMatrix, dict]:
    meta = json.loads(Path(meta_path).read_text())
    rows, dim = int(meta["rows"]), int(meta["dim"])
    raw = np.frombuffer(Path(bin_path).read_bytes(), dtype="<f4")
    if raw.size != rows * dim:
        raise ValueError(
            f"matrix file {bin_path} has {raw.size} floats, expected {rows}x{dim}"
        )
    return EmbeddingMatrix(raw.reshape(rows, dim).astype(np.float64)), meta
