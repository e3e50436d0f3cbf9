"""Instruction dataset ingestion and query pool construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

SOURCE_ORIGINAL = "original"
SOURCE_GENERATED = "generated"


class DatasetFormatError(ValueError):
    """The raw instruction dataset cannot be parsed into records."""


@dataclass(frozen=True)
class InstructionRecord:
    instruction: str
    input: str = ""
    output: str | None = None  # preserved but unused by the pipeline


@dataclass(frozen=True)
class Query:
    id: int
    text: str
    source: str = SOURCE_ORIGINAL
    cluster_id: int | None = None


@dataclass
class QueryPool:
    queries: list[Query] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.queries)

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def texts(self) -> list[str]:
        return [q.text for q in self.queries]

    def with_cluster_ids(self, labels) -> "QueryPool":
        """Copy of the pool with cluster_id set per query (labels aligned by position)."""
        if len(labels) != len(self.queries):
            raise ValueError("labels length does not match pool size")
        return QueryPool(
            [replace(q, cluster_id=int(lab)) for q, lab in zip(self.queries, labels)]
        )


def join_instruction_input(instruction: str, input_text: str) -> str:
    """Query text rule: instruction alone when input is empty, else joined by one newline."""
    if not input_text.strip():
        return instruction
    return f"{instruction}\n{input_text}"


def load_instruction_dataset(raw: bytes | str) -> list[InstructionRecord]:
    """Parse a JSON array of {"instruction", "input"?, "output"?} objects.

    Field values are whitespace-trimmed; every error names the offending
    record index.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError(f"dataset is not valid UTF-8: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"dataset is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise DatasetFormatError(
            f"dataset top level must be a JSON array, got {type(doc).__name__}"
        )

    records: list[InstructionRecord] = []
    for idx, item in enumerate(doc):
        if not isinstance(item, dict):
            raise DatasetFormatError(f"record {idx} is not a JSON object")
        if "instruction" not in item:
            raise DatasetFormatError(f"record {idx} is missing the \"instruction\" field")
        instruction = item["instruction"]
        if not isinstance(instruction, str):
            raise DatasetFormatError(f"record {idx} has a non-text \"instruction\" field")
        instruction = instruction.strip()
        if not instruction:
            raise DatasetFormatError(f"record {idx} has an empty \"instruction\" field")

        input_text = item.get("input", "")
        if input_text is None:
            input_text = ""
        if not isinstance(input_text, str):
            raise DatasetFormatError(f"record {idx} has a non-text \"input\" field")

        output = item.get("output")
        if output is not None and not isinstance(output, str):
            raise DatasetFormatError(f"record {idx} has a non-text \"output\" field")

        records.append(
            InstructionRecord(instruction=instruction, input=input_text.strip(), output=output)
        )
    return records


def build_query_pool(records: list[InstructionRecord]) -> QueryPool:
    """Build the initial query pool in record order, ids 0..N-1, no dedup."""
    if not records:
        raise ValueError("cannot build a query pool from an empty record list")
    queries = [
        Query(id=i, text=join_instruction_input(r.instruction, r.input), source=SOURCE_ORIGINAL)
        for i, r in enumerate(records)
    ]
    return QueryPool(queries)
