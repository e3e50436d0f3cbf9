"""Cluster-conditioned prompt construction, teacher API calls, and robust
parsing of generated instruction queries.

The prompt template is versioned by content hash; the hash is recorded in
every generation report so runs remain attributable to an exact template.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from ._http import ApiError, PostFn, api_headers, post_json_with_retry
from ._seeds import rng_from, stable_seed
from .cluster import RetainedClustering
from .corpus import SOURCE_GENERATED, Query, QueryPool, join_instruction_input

logger = logging.getLogger(__name__)


@dataclass
class TeacherEndpointConfig:
    base_url: str
    model_name: str
    temperature: float = 0.7
    max_tokens: int = 16384
    timeout: float = 300.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    max_concurrency: int = 4
    retry_jitter: bool = False  # keep False for reproducible scheduling in tests

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class ClusterPrompt:
    cluster_id: int
    example_texts: list[str]
    requested_count: int
    rendered: str


@dataclass
class GeneratedQuery:
    instruction: str
    input: str
    cluster_id: int


@dataclass
class ClusterOutcome:
    cluster_id: int
    requested: int
    received: int
    kept: int
    shortfall: int
    error: str | None = None


@dataclass
class GenerationReport:
    model_name: str
    base_url: str
    template_version: str
    examples_per_cluster: int
    queries_per_cluster: int
    seed: int
    temperature: float
    max_tokens: int
    clusters: list[ClusterOutcome] = field(default_factory=list)

    @property
    def total_kept(self) -> int:
        return sum(c.kept for c in self.clusters)

    @property
    def failed_clusters(self) -> list[int]:
        return [c.cluster_id for c in self.clusters if c.error is not None]


@dataclass
class GenerationResult:
    pool: QueryPool
    records: list[GeneratedQuery]
    report: GenerationReport


class QueryParseError(ValueError):
    """No usable JSON array of queries could be recovered from the text."""


class GenerationFailedError(RuntimeError):
    """Every cluster failed; no generated queries were produced."""

    def __init__(self, message: str, report: GenerationReport):
        super().__init__(message)
        self.report = report


OUTPUT_FORMAT_CONTRACT = 'a JSON array of objects with fields "instruction" and "input"'

PROMPT_TEMPLATE = """You are writing new instruction-following tasks for a language model.

The {example_count} example tasks below all belong to one semantic theme:

{examples}

Write exactly {count} new instructions on the same theme.
Requirements:
- Every new instruction must clearly belong to the same theme as the examples.
- Vary the wording, sentence structure, and task framing; do not copy the examples.
- Keep each instruction short (one or two sentences) and self-contained.
- Keep the tasks simple: no multi-step reasoning chains, no nested sub-tasks.
- If a task needs accompanying data, put that data in "input"; otherwise use an empty string.

Respond with ONLY {format_contract}. Do not wrap the JSON in code fences and do not add commentary.
"""

PROMPT_TEMPLATE_VERSION = hashlib.sha256(PROMPT_TEMPLATE.encode("utf-8")).hexdigest()[:12]


def build_cluster_prompt(
    cluster_queries: list[str],
    max_examples: int,
    count: int,
    seed: int,
    *,
    cluster_id: int = 0,
) -> ClusterPrompt:
    """Render the cluster-conditioned prompt.

    Examples are a seeded uniform sample without replacement of up to
    max_examples cluster queries (all of them when the cluster is
    smaller), kept in pool order. Byte-identical for identical inputs.
    """
    if not cluster_queries:
        raise ValueError("cannot build a prompt for an empty cluster")
    if max_examples < 1 or count < 1:
        raise ValueError("max_examples and count must be >= 1")
    take = min(max_examples, len(cluster_queries))
    rng = rng_from(seed, "prompt-examples")
    picked = sorted(rng.choice(len(cluster_queries), size=take, replace=False).tolist())
    examples = [cluster_queries[i] for i in picked]
    numbered = "\n".join(f"{i + 1}. {text}" for i, text in enumerate(examples))
    rendered = PROMPT_TEMPLATE.format(
        example_count=len(examples),
        examples=numbered,
        count=count,
        format_contract=OUTPUT_FORMAT_CONTRACT,
    )
    return ClusterPrompt(
        cluster_id=cluster_id,
        example_texts=examples,
        requested_count=count,
        rendered=rendered,
    )


def chat_complete(
    config: TeacherEndpointConfig,
    prompt: str,
    *,
    post_fn: PostFn | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One chat-completions request with exponential-backoff retries.

    Returns the first message content; raises ApiError after exhausting
    config.max_attempts or on a non-conforming response body.
    """
    url = config.base_url.rstrip("/") + "/chat/completions"
    payload = {
        "model": config.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    doc = post_json_with_retry(
        url,
        payload,
        headers=api_headers(),
        timeout=config.timeout,
        max_attempts=config.max_attempts,
        backoff_base=config.backoff_base,
        jitter=config.retry_jitter,
        post_fn=post_fn,
        sleep=sleep,
    )
    try:
        content = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ApiError(f"chat response body is non-conforming: {str(doc)[:300]}") from exc
    if not isinstance(content, str):
        raise ApiError("chat response content is not text")
    return content


_FENCE_OPEN = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\r?\n?")


def _strip_code_fence(raw: str) -> str:
    """Interior of the first fenced block, tolerating a missing closing fence."""
    match = _FENCE_OPEN.search(raw)
    if not match:
        return raw
    rest = raw[match.end():]
    closing = rest.find("```")
    return rest[:closing] if closing >= 0 else rest


def _scan_array(text: str, start: int) -> tuple[int | None, int | None]:
    """Scan a JSON array from text[start] == '['.

    Returns (array_end, last_object_end): array_end is the index one past
    the matching ']' when the array terminates cleanly, else None;
    last_object_end is one past the '}' closing the most recent complete
    top-level object. String contents (including escapes and brackets
    inside strings) are skipped.
    """
    depth = 0
    in_string = False
    escaped = False
    last_object_end = None
    object_depth_start = None
    for pos in range(start, len(text)):
        ch = text[pos]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in "[{":
            depth += 1
            if ch == "{" and depth == 2:
                object_depth_start = pos
        elif ch in "]}":
            depth -= 1
            if ch == "}" and depth == 1 and object_depth_start is not None:
                last_object_end = pos + 1
            if depth == 0:
                return pos + 1, last_object_end
    return None, last_object_end


def parse_generated_queries(raw: str, cluster_id: int = 0) -> list[GeneratedQuery]:
    """Recover generated queries from possibly messy model output.

    Extracts the first fenced code block if present, finds the first JSON
    array, and repairs truncated output by cutting back to the last
    complete object and closing the array. Elements without a nonempty
    "instruction" are dropped; a missing "input" becomes empty. Raises
    QueryParseError when no array is found or nothing valid remains.
    """
    text = _strip_code_fence(raw)
    start = text.find("[")
    if start < 0:
        raise QueryParseError("no JSON array found in response")
    array_end, last_object_end = _scan_array(text, start)

    candidate = None
    if array_end is not None:
        candidate = text[start:array_end]
    elif last_object_end is not None:
        candidate = text[start:last_object_end] + "]"
    if candidate is None:
        raise QueryParseError("no complete object found in truncated array")
    try:
        items = json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise QueryParseError(f"recovered array is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise QueryParseError("recovered JSON is not an array")

    queries: list[GeneratedQuery] = []
    for item in items:
        if not isinstance(item, dict):
            continue
        instruction = item.get("instruction")
        if not isinstance(instruction, str) or not instruction.strip():
            continue
        input_value = item.get("input", "")
        input_text = input_value.strip() if isinstance(input_value, str) else ""
        queries.append(
            GeneratedQuery(
                instruction=instruction.strip(), input=input_text, cluster_id=cluster_id
            )
        )
    if not queries:
        raise QueryParseError("zero valid objects after repair")
    return queries


def _generate_for_cluster(
    cluster_id: int,
    texts: list[str],
    config: TeacherEndpointConfig,
    max_examples: int,
    count: int,
    seed: int,
    post_fn: PostFn | None,
    sleep: Callable[[float], None],
) -> tuple[ClusterOutcome, list[GeneratedQuery]]:
    try:
        prompt = build_cluster_prompt(
            texts,
            max_examples,
            count,
            stable_seed(seed, "cluster-prompt", cluster_id),
            cluster_id=cluster_id,
        )
        raw = chat_complete(config, prompt.rendered, post_fn=post_fn, sleep=sleep)
        parsed = parse_generated_queries(raw, cluster_id=cluster_id)
    except (ApiError, QueryParseError, ValueError) as exc:
        logger.warning("cluster %d generation failed: %s", cluster_id, exc)
        return ClusterOutcome(cluster_id, count, 0, 0, count, error=str(exc)), []
    kept = parsed[:count]  # oversized responses truncated, keeping B = K*m exact
    outcome = ClusterOutcome(
        cluster_id=cluster_id,
        requested=count,
        received=len(parsed),
        kept=len(kept),
        shortfall=max(0, count - len(parsed)),
    )
    return outcome, kept


def generate_query_set(
    retained: RetainedClustering,
    config: TeacherEndpointConfig,
    *,
    max_examples: int = 1000,
    count: int = 10,
    seed: int = 42,
    post_fn: PostFn | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> GenerationResult:
    """Generate up to `count` queries per retained cluster via the teacher.

    Clusters are queried with up to config.max_concurrency requests in
    flight; the output pool and report are assembled in cluster-id order
    regardless of completion order. Per-cluster failures are recorded in
    the report; only a full wipeout raises GenerationFailedError.
    """
    if retained.num_clusters == 0:
        raise ValueError("retained clustering is empty")
    cluster_texts = [retained.cluster_texts(k) for k in range(retained.num_clusters)]

    report = GenerationReport(
        model_name=config.model_name,
        base_url=config.base_url,
        template_version=PROMPT_TEMPLATE_VERSION,
        examples_per_cluster=max_examples,
        queries_per_cluster=count,
        seed=seed,
        temperature=config.temperature,
        max_tokens=config.max_tokens,
    )

    workers = max(1, config.max_concurrency)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(
                _generate_for_cluster,
                k,
                cluster_texts[k],
                config,
                max_examples,
                count,
                seed,
                post_fn,
                sleep,
            )
            for k in range(retained.num_clusters)
        ]
        results = [f.result() for f in futures]  # cluster-id order

    records: list[GeneratedQuery] = []
    for outcome, kept in results:
        report.clusters.append(outcome)
        records.extend(kept)

    if not records:
        raise GenerationFailedError("generation failed for every cluster", report)

    queries = [
        Query(
            id=i,
            text=join_instruction_input(rec.instruction, rec.input),
            source=SOURCE_GENERATED,
            cluster_id=rec.cluster_id,
        )
        for i, rec in enumerate(records)
    ]
    return GenerationResult(pool=QueryPool(queries), records=records, report=report)
