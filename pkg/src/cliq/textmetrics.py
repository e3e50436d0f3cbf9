"""BLEU and ROUGE-1/2/L/Lsum implemented directly from their definitions.

Conventions (also recorded in batch-scorer output metadata):
- BLEU uses add-epsilon smoothing (1e-9) on zero clipped counts and the
  standard brevity penalty min(1, exp(1 - |ref|/|cand|)).
- ROUGE-Lsum splits sentences on newlines only and uses the union-LCS
  variant with candidate-multiplicity clipping; LCS match positions come
  from the canonical right-to-left walk that skips a reference token
  first when both skip directions preserve LCS length.
"""

from __future__ import annotations

import csv
import json
import math
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

BLEU_EPSILON = 1e-9

SMOOTHING_NOTE = "bleu: add-epsilon 1e-9 on zero counts; rouge-lsum: newline sentences, union-LCS"


@dataclass(frozen=True)
class ScoreTriple:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, cand_total: int, ref_total: int) -> "ScoreTriple":
        p = overlap / cand_total if cand_total > 0 else 0.0
        r = overlap / ref_total if ref_total > 0 else 0.0
        f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if end > start:
            tokens.append(raw[start:end])
    return tokens


def _ngram_counts(tokens: Sequence[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def bleu(
    candidate: Sequence[str],
    reference: Sequence[str],
    max_n: int = 4,
    epsilon: float = BLEU_EPSILON,
) -> float:
    """Sentence BLEU: geometric mean of clipped n-gram precisions times
    the brevity penalty. An empty candidate scores 0."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = _ngram_counts(candidate, n)
        ref_counts = _ngram_counts(reference, n)
        total = max(0, len(candidate) - n + 1)
        clipped = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
        if total == 0:
            p = epsilon
        elif clipped == 0:
            p = epsilon / total
        else:
            p = clipped / total
        log_sum += math.log(p)
    bp = min(1.0, math.exp(1.0 - len(reference) / len(candidate)))
    return bp * math.exp(log_sum / max_n)


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> ScoreTriple:
    """N-gram multiset overlap: sum over types of min(count_cand, count_ref)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand_counts = _ngram_counts(candidate, n)
    ref_counts = _ngram_counts(reference, n)
    overlap = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
    return ScoreTriple.from_counts(
        overlap, max(0, len(candidate) - n + 1), max(0, len(reference) - n + 1)
    )


def _lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        row, prev = dp[i], dp[i - 1]
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = prev[j] if prev[j] >= row[j - 1] else row[j - 1]
    return dp


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> ScoreTriple:
    """LCS-based scores: p = LCS/|cand|, r = LCS/|ref|."""
    if not candidate or not reference:
        return ScoreTriple(0.0, 0.0, 0.0)
    lcs = _lcs_table(candidate, reference)[len(candidate)][len(reference)]
    return ScoreTriple.from_counts(lcs, len(candidate), len(reference))


def lcs_match_positions(reference: Sequence[str], candidate: Sequence[str]) -> set[int]:
    """Reference-token positions matched by the canonical LCS walk.

    Walk right-to-left: equal tokens always match; otherwise skip the
    reference token when that preserves LCS length (tie included), else
    skip the candidate token.
    """
    dp = _lcs_table(reference, candidate)
    i, j = len(reference), len(candidate)
    positions: set[int] = set()
    while i > 0 and j > 0:
        if reference[i - 1] == candidate[j - 1]:
            positions.add(i - 1)
            i -= 1
            j -= 1
        elif dp[i - 1][j] >= dp[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return positions


def _split_sentences(text: str) -> list[list[str]]:
    sents = [tokenize(line) for line in text.split("\n")]
    return [s for s in sents if s]


def rouge_lsum(candidate_text: str, reference_text: str) -> ScoreTriple:
    """Summary-level union-LCS ROUGE.

    For each reference sentence, union the canonical LCS match positions
    against every candidate sentence; matched tokens are counted only
    while the candidate still has unspent occurrences of that token
    (clipping keeps precision in [0, 1]).
    """
    ref_sents = _split_sentences(reference_text)
    cand_sents = _split_sentences(candidate_text)
    if not ref_sents or not cand_sents:
        return ScoreTriple(0.0, 0.0, 0.0)
    ref_total = sum(len(s) for s in ref_sents)
    cand_total = sum(len(s) for s in cand_sents)

    cand_budget: dict[str, int] = {}
    for sent in cand_sents:
        for tok in sent:
            cand_budget[tok] = cand_budget.get(tok, 0) + 1

    hits = 0
    for ref_sent in ref_sents:
        union: set[int] = set()
        for cand_sent in cand_sents:
            union |= lcs_match_positions(ref_sent, cand_sent)
        for pos in sorted(union):
            tok = ref_sent[pos]
            if cand_budget.get(tok, 0) > 0:
                cand_budget[tok] -= 1
                hits += 1
    return ScoreTriple.from_counts(hits, cand_total, ref_total)


def score_pair(candidate_text: str, reference_text: str) -> dict[str, float]:
    """All metrics for one candidate/reference text pair."""
    cand = tokenize(candidate_text)
    ref = tokenize(reference_text)
    r1 = rouge_n(cand, ref, 1)
    r2 = rouge_n(cand, ref, 2)
    rl = rouge_l(cand, ref)
    rlsum = rouge_lsum(candidate_text, reference_text)
    out = {"bleu": bleu(cand, ref)}
    for name, triple in (("rouge1", r1), ("rouge2", r2), ("rougeL", rl), ("rougeLsum", rlsum)):
        out[f"{name}_p"] = triple.precision
        out[f"{name}_r"] = triple.recall
        out[f"{name}_f"] = triple.f1
    return out


SCORE_COLUMNS = [
    "bleu",
    "rouge1_p", "rouge1_r", "rouge1_f",
    "rouge2_p", "rouge2_r", "rouge2_f",
    "rougeL_p", "rougeL_r", "rougeL_f",
    "rougeLsum_p", "rougeLsum_r", "rougeLsum_f",
]


def score_pairs_jsonl(
    in_path: str | Path, out_path: str | Path, *, percent: bool = False
) -> dict[str, float]:
    """Score a JSONL file of {"candidate", "reference"} pairs.

    Writes per-pair rows plus a final corpus-mean row to out_path and
    returns the corpus means (always as fractions).
    """
    pairs = []
    with open(in_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "candidate" not in obj or "reference" not in obj:
                raise ValueError(f"line {line_no}: pair needs candidate and reference fields")
            pairs.append((str(obj["candidate"]), str(obj["reference"])))
    if not pairs:
        raise ValueError(f"no pairs found in {in_path}")

    rows = [score_pair(c, r) for c, r in pairs]
    means = {col: sum(row[col] for row in rows) / len(rows) for col in SCORE_COLUMNS}

    scale = 100.0 if percent else 1.0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", *SCORE_COLUMNS, "note"])
        for idx, row in enumerate(rows):
            writer.writerow([idx, *(repr(row[c] * scale) for c in SCORE_COLUMNS), ""])
        writer.writerow(["mean", *(repr(means[c] * scale) for c in SCORE_COLUMNS), SMOOTHING_NOTE])
    return means
