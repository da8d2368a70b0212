"""Record file serialization, implemented independently of the consumer side.

Byte layout ("PJR1", version 1; all integers little-endian, matrices
row-major float32 natural-log probabilities):

    header: magic "PJR1" | u32 version | u32 vocab_size | u32 flags
            | u32 top_k | u64 record_count
    flags:  bit 0 logits channel, bit 1 syntactic distance, bit 2 top-K rows

    record: example_id (u32 len + utf8) | sentence (u32 n + n*u32,
            0xFFFFFFFF = masked slot) | pos_a pos_b gold_a gold_b (u32 each)
            | scheme u8 (0 random_pairs / 1 contiguous_pairs / 2 synthetic)
            | token_distance u32 | [syntactic i32, -1 = none]
            | cond_a_given_b [+ its logits] | cond_b_given_a [+ its logits]
            | marg_a (V*f32) | marg_b (V*f32)

    dense matrix:  V*V f32
    top-K matrix:  per row, K*u32 ascending kept indices then K*f32 values

Log probabilities are floored at log(1e-12) before narrowing to float32.
Top-K rows keep the K highest-probability entries (ties to the smaller
index); kept mass is renormalized only when it deviates from 1 by more than
1e-6. Truncated logit rows store raw scores for the kept indices.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"PJR1"
VERSION = 1
FLAG_LOGITS = 1
FLAG_SYNTACTIC = 2
FLAG_TOPK = 4
MASK_SENTINEL = 0xFFFFFFFF

LOG_FLOOR = math.log(1e-12)

SCHEME_CODES = {"random_pairs": 0, "contiguous_pairs": 1, "synthetic": 2}
SCHEME_NAMES = {v: k for k, v in SCHEME_CODES.items()}


class RecordFormatError(ValueError):
    pass


def top_k_indices(row: np.ndarray, k: int) -> np.ndarray:
    """Ascending indices of the row's K largest values, ties to the smaller
    index; deterministic and O(V + K log K)."""
    v = row.shape[0]
    if k >= v:
        return np.arange(v, dtype=np.int64)
    part = np.argpartition(-row, k - 1)[:k]
    kth = row[part].min()
    above = np.nonzero(row > kth)[0]
    at = np.nonzero(row == kth)[0]
    chosen = np.concatenate([above, at[: k - above.size]])
    return np.sort(chosen).astype(np.int64)


@dataclass
class TruncatedMatrix:
    """Sparse rows: per context row, the kept target indices and values."""

    indices: np.ndarray  # (V, K) target indices, ascending per row
    values: np.ndarray   # (V, K) values aligned with indices

    @property
    def shape(self) -> tuple[int, int]:
        v = self.indices.shape[0]
        return (v, v)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class ExtractedRecord:
    """One masked-pair example; tables are [context token][target token],
    dense arrays or TruncatedMatrix for memory-bounded jobs."""

    example_id: str
    sentence: list[int]  # -1 marks masked slots
    pos_a: int
    pos_b: int
    gold_a: int
    gold_b: int
    scheme: str
    token_distance: int
    cond_a_given_b: np.ndarray | TruncatedMatrix
    cond_b_given_a: np.ndarray | TruncatedMatrix
    marg_a: np.ndarray
    marg_b: np.ndarray
    logits_a: Optional[np.ndarray | TruncatedMatrix] = None
    logits_b: Optional[np.ndarray | TruncatedMatrix] = None
    syntactic_distance: Optional[int] = None

    @property
    def vocab_size(self) -> int:
        return self.cond_a_given_b.shape[0]


def _floored_f32(values: np.ndarray) -> np.ndarray:
    return np.maximum(values, LOG_FLOOR).astype("<f4")


def _renormalized(vals: np.ndarray) -> np.ndarray:
    """Restore unit mass to kept log values when off by more than 1e-6."""
    shift = vals.max()
    log_mass = shift + math.log(np.exp(vals - shift).sum())
    if abs(math.exp(log_mass) - 1.0) > 1e-6:
        return vals - log_mass
    return vals


def _truncate_row(row: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    idx = top_k_indices(row, k)
    return idx.astype("<u4"), _renormalized(row[idx])


def _write_matrix(fh, table: np.ndarray | TruncatedMatrix, top_k: int,
                  companion) -> None:
    if top_k == 0:
        fh.write(_floored_f32(table).tobytes())
        if companion is not None:
            fh.write(np.asarray(companion).astype("<f4").tobytes())
        return
    if isinstance(table, TruncatedMatrix):
        if table.k != top_k:
            raise ValueError(f"record truncated to K={table.k} but file uses K={top_k}")
        for row_i in range(table.indices.shape[0]):
            fh.write(table.indices[row_i].astype("<u4").tobytes())
            vals = _renormalized(np.asarray(table.values[row_i], dtype=np.float64))
            fh.write(_floored_f32(vals).tobytes())
        if companion is not None:
            fh.write(np.asarray(companion.values).astype("<f4").tobytes())
        return
    kept_companion = []
    for row_i in range(table.shape[0]):
        idx, vals = _truncate_row(np.asarray(table[row_i], dtype=np.float64), top_k)
        fh.write(idx.tobytes())
        fh.write(_floored_f32(vals).tobytes())
        if companion is not None:
            kept_companion.append(np.asarray(companion[row_i])[idx.astype(np.int64)])
    for row in kept_companion:
        fh.write(row.astype("<f4").tobytes())


def write_records(records: Sequence[ExtractedRecord], path: str | Path,
                  top_k: int = 0) -> None:
    path = Path(path)
    if records:
        v = records[0].vocab_size
        has_logits = records[0].logits_a is not None
    else:
        v, has_logits = 0, False
    has_syntactic = any(r.syntactic_distance is not None for r in records)
    k = min(top_k, v) if top_k else 0
    if k == v:
        k = 0
    for r in records:
        if isinstance(r.cond_a_given_b, TruncatedMatrix) and r.cond_a_given_b.k != k:
            raise ValueError(f"record {r.example_id}: rows truncated to K={r.cond_a_given_b.k} "
                             f"but the file is being written with K={k}")
    flags = (FLAG_LOGITS if has_logits else 0) | (FLAG_SYNTACTIC if has_syntactic else 0) \
        | (FLAG_TOPK if k else 0)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIQ", VERSION, v, flags, k, len(records)))
        for r in records:
            payload = r.example_id.encode("utf-8")
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", len(r.sentence)))
            for tok in r.sentence:
                fh.write(struct.pack("<I", MASK_SENTINEL if tok < 0 else tok))
            fh.write(struct.pack("<IIII", r.pos_a, r.pos_b, r.gold_a, r.gold_b))
            fh.write(struct.pack("<B", SCHEME_CODES[r.scheme]))
            fh.write(struct.pack("<I", r.token_distance))
            if has_syntactic:
                sd = -1 if r.syntactic_distance is None else r.syntactic_distance
                fh.write(struct.pack("<i", sd))
            _write_matrix(fh, r.cond_a_given_b, k, r.logits_a if has_logits else None)
            _write_matrix(fh, r.cond_b_given_a, k, r.logits_b if has_logits else None)
            fh.write(_floored_f32(r.marg_a).tobytes())
            fh.write(_floored_f32(r.marg_b).tobytes())


class _Cursor:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise RecordFormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)


def read_records(path: str | Path) -> tuple[list[ExtractedRecord], int]:
    """Parse a record file; returns (records, header top_k)."""
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    if cur.take(4) != MAGIC:
        raise RecordFormatError(f"{path}: bad magic")
    version, v, flags, k, count = struct.unpack("<IIIIQ", cur.take(24))
    if version != VERSION:
        raise RecordFormatError(f"{path}: unsupported version {version}")
    has_logits = bool(flags & FLAG_LOGITS)
    has_syntactic = bool(flags & FLAG_SYNTACTIC)

    def read_matrix():
        if k == 0:
            return cur.f32s(v * v).reshape(v, v), None
        dense = np.full((v, v), LOG_FLOOR)
        kept = np.empty((v, k), dtype=np.int64)
        for row_i in range(v):
            idx = np.frombuffer(cur.take(4 * k), dtype="<u4").astype(np.int64)
            kept[row_i] = idx
            dense[row_i, idx] = cur.f32s(k)
        return dense, kept

    def read_logits(kept):
        if k == 0:
            return cur.f32s(v * v).reshape(v, v)
        dense = np.empty((v, v))
        for row_i in range(v):
            vals = cur.f32s(k)
            shift = vals.max()
            pad = shift + math.log(np.exp(vals - shift).sum()) + LOG_FLOOR
            dense[row_i, :] = pad
            dense[row_i, kept[row_i]] = vals
        return dense

    records = []
    for _ in range(count):
        example_id = cur.take(cur.u32()).decode("utf-8")
        n_tokens = cur.u32()
        sentence = [-1 if t == MASK_SENTINEL else int(t)
                    for t in np.frombuffer(cur.take(4 * n_tokens), dtype="<u4")]
        pos_a, pos_b, gold_a, gold_b = struct.unpack("<IIII", cur.take(16))
        scheme = SCHEME_NAMES[cur.take(1)[0]]
        token_distance = cur.u32()
        syntactic = None
        if has_syntactic:
            (raw_sd,) = struct.unpack("<i", cur.take(4))
            syntactic = None if raw_sd < 0 else raw_sd
        cond_a, kept_a = read_matrix()
        logits_a = read_logits(kept_a) if has_logits else None
        cond_b, kept_b = read_matrix()
        logits_b = read_logits(kept_b) if has_logits else None
        marg_a = cur.f32s(v)
        marg_b = cur.f32s(v)
        records.append(ExtractedRecord(
            example_id=example_id, sentence=sentence, pos_a=pos_a, pos_b=pos_b,
            gold_a=gold_a, gold_b=gold_b, scheme=scheme, token_distance=token_distance,
            cond_a_given_b=cond_a, cond_b_given_a=cond_b, marg_a=marg_a, marg_b=marg_b,
            logits_a=logits_a, logits_b=logits_b, syntactic_distance=syntactic))
    if cur.pos != len(cur.data):
        raise RecordFormatError(f"{path}: trailing bytes")
    return records, k
