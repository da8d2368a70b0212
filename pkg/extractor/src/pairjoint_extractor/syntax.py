"""Dependency-tree distance annotation for extracted records.

Parses come from an external dependency parser as JSON lines, one object per
corpus sentence: {"words": [...], "heads": [...]} with 0-based head indices
and -1 for the root. A record is matched to a parse by re-tokenizing the
parse's words and comparing with the record's sentence (gold tokens restored
at the masked slots); records with no aligning parse are dropped with a log
line. The annotated distance is the path length between the two masked
tokens' words in the undirected dependency tree, 0 when both masked tokens
are pieces of the same word.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from .records import ExtractedRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SentenceParse:
    words: tuple[str, ...]
    heads: tuple[int, ...]

    def __post_init__(self):
        if len(self.words) != len(self.heads):
            raise ValueError("words and heads must have the same length")


def read_parses(path: str | Path) -> list[SentenceParse]:
    parses = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        parses.append(SentenceParse(tuple(obj["words"]), tuple(obj["heads"])))
    return parses


def tree_distance(heads: tuple[int, ...], i: int, j: int) -> int:
    """Shortest path between words i and j over undirected head edges."""
    if i == j:
        return 0
    adjacency: dict[int, list[int]] = {k: [] for k in range(len(heads))}
    for child, head in enumerate(heads):
        if head >= 0:
            adjacency[child].append(head)
            adjacency[head].append(child)
    seen = {i}
    queue = deque([(i, 0)])
    while queue:
        node, depth = queue.popleft()
        for nxt in adjacency[node]:
            if nxt == j:
                return depth + 1
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, depth + 1))
    raise ValueError(f"words {i} and {j} are not connected in the parse")


def _token_word_map(tokenizer, parse: SentenceParse) -> tuple[list[int], list[int]]:
    """Token ids and per-token word indices for a parse's words, with
    sequence delimiters mapped to word index -1."""
    ids = [tokenizer.cls_token_id]
    word_of = [-1]
    for w_idx, word in enumerate(parse.words):
        pieces = tokenizer(word, add_special_tokens=False)["input_ids"]
        ids.extend(pieces)
        word_of.extend([w_idx] * len(pieces))
    ids.append(tokenizer.sep_token_id)
    word_of.append(-1)
    return ids, word_of


def annotate_syntactic_distance(records: list[ExtractedRecord],
                                parses: list[SentenceParse],
                                tokenizer) -> list[ExtractedRecord]:
    """Fill ``syntactic_distance`` on every record whose restored sentence
    aligns with a parse; unaligned records are dropped with a log line."""
    alignments: dict[tuple[int, ...], tuple[SentenceParse, list[int]]] = {}
    for parse in parses:
        ids, word_of = _token_word_map(tokenizer, parse)
        alignments[tuple(ids)] = (parse, word_of)

    annotated = []
    for record in records:
        restored = list(record.sentence)
        restored[record.pos_a] = record.gold_a
        restored[record.pos_b] = record.gold_b
        hit = alignments.get(tuple(restored))
        if hit is None:
            logger.warning("record %s: no parse aligns with its %d tokens, dropped",
                           record.example_id, len(restored))
            continue
        parse, word_of = hit
        word_a, word_b = word_of[record.pos_a], word_of[record.pos_b]
        if word_a < 0 or word_b < 0:
            logger.warning("record %s: masked position sits on a delimiter, dropped",
                           record.example_id)
            continue
        record.syntactic_distance = tree_distance(parse.heads, word_a, word_b)
        annotated.append(record)
    return annotated
