"""Binary record files, joint files, and plain-text dataset manifests.

Record file layout (extension ``.pjr``), all integers little-endian, all
matrices row-major float32 natural-log probabilities:

    header:
        magic           4 bytes  ASCII "PJR1"
        version         u32      currently 1
        vocab_size      u32      V (0 allowed only for empty files)
        flags           u32      bit 0: logits channel present
                                 bit 1: syntactic-distance field present
                                 bit 2: rows are top-K truncated
        top_k           u32      effective K per row (0 when dense)
        record_count    u64

    record:
        example_id      u32 length + UTF-8 bytes
        sentence        u32 length + that many u32 token ids
                        (0xFFFFFFFF marks a masked slot)
        pos_a, pos_b    u32, u32
        gold_a, gold_b  u32, u32
        scheme          u8       0 random_pairs, 1 contiguous_pairs, 2 synthetic
        token_distance  u32
        syntactic       i32      only when flagged; -1 means not annotated
        cond_a_given_b  matrix   [context b][target a]
        (its logits)    matrix   only when flagged
        cond_b_given_a  matrix   [context a][target b]
        (its logits)    matrix   only when flagged
        marg_a, marg_b  V * f32 each

    matrix (dense):     V * V f32
    matrix (top-K):     per row: K * u32 ascending kept indices, K * f32 values

Writers floor log probabilities at log(1e-12) before narrowing to float32;
top-K rows keep the K largest-probability entries (ties to the smaller
index) and renormalize the kept mass only when it is off unity by more than
1e-6, so reading a file and writing it back is byte-identical. Truncated
logit rows keep the raw scores of the kept indices; on read, missing logits
are padded softmax-consistently at logsumexp(kept) + log(1e-12) and missing
probabilities at the floor.

Read validation: every probability row must carry unit mass within 1e-4.
Strict mode rejects the file naming the record and row; lenient mode
renormalizes the row and logs a warning. Either way rows are floored, and
rows whose mass still deviates by more than 1e-6 are renormalized so the
in-memory invariants hold.

Joint files (extension ``.pjj``) share the conventions: magic "PJJ1",
version, vocab_size, method code (u8: 0 mlm, 1 mrf, 2 mrf_logit, 3 hcb,
4 ag, 255 truth), u64 count; then per entry: example_id, V*V f32 log joint,
a u8 pivot flag followed by two u32 when set, and a u8 iterations flag
followed by one u32 when set. Log joints are renormalized on read to restore
the unit-mass invariant lost to float32 narrowing.

Manifests are plain text, one ``key: value`` per line; ``record_file`` may
repeat and is resolved relative to the manifest's directory; ``param.<name>``
lines carry free-form extraction parameters. ``#`` starts a comment line.

Files are immutable once written: any number of concurrent readers is safe,
writers must own the path exclusively.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .core import (
    LOG_FLOOR,
    ROW_SUM_TOL,
    ConditionalTable,
    InputError,
    JointTable,
    MarginalVector,
    PairRecord,
    logsumexp,
)

logger = logging.getLogger(__name__)

RECORD_MAGIC = b"PJR1"
JOINT_MAGIC = b"PJJ1"
FORMAT_VERSION = 1

FLAG_LOGITS = 1
FLAG_SYNTACTIC = 2
FLAG_TOPK = 4

MASK_SENTINEL = 0xFFFFFFFF
ROW_MASS_FILE_TOL = 1e-4

_SCHEME_CODES = {"random_pairs": 0, "contiguous_pairs": 1, "synthetic": 2}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_CODES.items()}
_METHOD_CODES = {"mlm": 0, "mrf": 1, "mrf_logit": 2, "hcb": 3, "ag": 4, "truth": 255}
_METHOD_NAMES = {v: k for k, v in _METHOD_CODES.items()}


class FormatError(InputError):
    """Malformed or truncated record/joint file."""


@dataclass(frozen=True)
class RecordFileHeader:
    version: int
    vocab_size: int
    has_logits: bool
    has_syntactic: bool
    top_k: int
    record_count: int


# ---------------------------------------------------------------------------
# low-level stream helpers

class _Reader:
    def __init__(self, fh: BinaryIO, path: Path):
        self._fh = fh
        self._path = path

    def raw(self, n: int) -> bytes:
        data = self._fh.read(n)
        if len(data) != n:
            raise FormatError(f"{self._path}: truncated file (wanted {n} bytes, got {len(data)})")
        return data

    def u8(self) -> int:
        return self.raw(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.raw(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.raw(8))[0]

    def f32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.raw(4 * n), dtype="<f4").astype(np.float64)

    def u32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.raw(4 * n), dtype="<u4")

    def string(self) -> str:
        return self.raw(self.u32()).decode("utf-8")

    def at_end(self) -> bool:
        probe = self._fh.read(1)
        if probe:
            self._fh.seek(-1, 1)
            return False
        return True


def _w_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _w_string(fh: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    _w_u32(fh, len(data))
    fh.write(data)


def _narrow_logs(values: np.ndarray) -> np.ndarray:
    """Floor at LOG_FLOOR and narrow to little-endian float32 for disk."""
    return np.maximum(values, LOG_FLOOR).astype("<f4")


# ---------------------------------------------------------------------------
# matrices

def _truncate_row(log_row: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (ascending) and log values of the row's K largest entries.

    Kept mass is renormalized only when it is off unity by more than
    ROW_SUM_TOL, which keeps already-truncated rows byte-stable.
    """
    order = np.argsort(-log_row, kind="stable")[:k]
    idx = np.sort(order)
    vals = log_row[idx]
    mass = float(np.exp(logsumexp(vals)))
    if abs(mass - 1.0) > ROW_SUM_TOL:
        vals = vals - logsumexp(vals)
    return idx.astype("<u4"), vals


def _write_matrix(fh: BinaryIO, table: np.ndarray, top_k: int,
                  companion: Optional[np.ndarray] = None) -> None:
    """Write one V x V log-prob matrix (and optionally its logits companion,
    truncated to the same kept indices)."""
    if top_k == 0:
        fh.write(_narrow_logs(table).tobytes())
        if companion is not None:
            fh.write(companion.astype("<f4").tobytes())
        return
    kept_comp = []
    for row_i in range(table.shape[0]):
        idx, vals = _truncate_row(table[row_i], top_k)
        fh.write(idx.tobytes())
        fh.write(_narrow_logs(vals).tobytes())
        if companion is not None:
            kept_comp.append(companion[row_i][idx.astype(np.int64)])
    if companion is not None:
        for row in kept_comp:
            fh.write(row.astype("<f4").tobytes())


def _read_matrix(reader: _Reader, v: int, top_k: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Dense log-prob matrix and, for truncated files, the kept index rows."""
    if top_k == 0:
        return reader.f32s(v * v).reshape(v, v), None
    dense = np.full((v, v), LOG_FLOOR)
    kept = np.empty((v, top_k), dtype=np.int64)
    for row_i in range(v):
        idx = reader.u32s(top_k).astype(np.int64)
        if np.any(idx >= v):
            raise FormatError(f"kept index {int(idx.max())} out of range for V={v}")
        kept[row_i] = idx
        dense[row_i, idx] = reader.f32s(top_k)
    return dense, kept


def _read_logits_matrix(reader: _Reader, v: int, top_k: int,
                        kept: Optional[np.ndarray]) -> np.ndarray:
    if top_k == 0:
        return reader.f32s(v * v).reshape(v, v)
    dense = np.empty((v, v))
    for row_i in range(v):
        vals = reader.f32s(top_k)
        # softmax-consistent pad: missing entries get floor-level relative mass
        pad = float(logsumexp(vals)) + LOG_FLOOR
        dense[row_i, :] = pad
        dense[row_i, kept[row_i]] = vals
    return dense


# ---------------------------------------------------------------------------
# record files

def write_records(records: Sequence[PairRecord], path: str | Path,
                  top_k: Optional[int] = None) -> None:
    """Serialize records; ``top_k`` switches rows to the truncated layout."""
    path = Path(path)
    if records:
        v = records[0].vocab_size
        has_logits = records[0].has_logits
        for r in records:
            if r.vocab_size != v:
                raise InputError(f"record {r.example_id}: vocab {r.vocab_size} != {v}")
            if r.has_logits != has_logits:
                raise InputError(f"record {r.example_id}: logits channel must be present on "
                                 "all records or none")
    else:
        v, has_logits = 0, False
    has_syntactic = any(r.syntactic_distance is not None for r in records)
    k = 0 if not top_k else min(int(top_k), v)
    if k == v:
        k = 0

    flags = (FLAG_LOGITS if has_logits else 0) \
        | (FLAG_SYNTACTIC if has_syntactic else 0) \
        | (FLAG_TOPK if k else 0)

    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<IIIIQ", FORMAT_VERSION, v, flags, k, len(records)))
        for r in records:
            _w_string(fh, r.example_id)
            _w_u32(fh, len(r.sentence))
            for tok in r.sentence:
                _w_u32(fh, MASK_SENTINEL if tok < 0 else tok)
            fh.write(struct.pack("<IIII", r.pos_a, r.pos_b, r.gold_a, r.gold_b))
            fh.write(struct.pack("<B", _SCHEME_CODES[r.scheme]))
            _w_u32(fh, r.token_distance)
            if has_syntactic:
                fh.write(struct.pack("<i", -1 if r.syntactic_distance is None else r.syntactic_distance))
            _write_matrix(fh, r.cond_a_given_b.log_probs, k,
                          r.cond_a_given_b.logits if has_logits else None)
            _write_matrix(fh, r.cond_b_given_a.log_probs, k,
                          r.cond_b_given_a.logits if has_logits else None)
            fh.write(_narrow_logs(r.marg_a.log_probs).tobytes())
            fh.write(_narrow_logs(r.marg_b.log_probs).tobytes())


def read_header(path: str | Path) -> RecordFileHeader:
    path = Path(path)
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        magic = reader.raw(4)
        if magic != RECORD_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {RECORD_MAGIC!r}")
        version = reader.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        v = reader.u32()
        flags = reader.u32()
        top_k = reader.u32()
        count = reader.u64()
    return RecordFileHeader(version=version, vocab_size=v,
                            has_logits=bool(flags & FLAG_LOGITS),
                            has_syntactic=bool(flags & FLAG_SYNTACTIC),
                            top_k=top_k, record_count=count)


def _prepare_rows(raw: np.ndarray, strict: bool, path: Path, example_id: str,
                  what: str) -> tuple[np.ndarray, int, int]:
    """Validate row masses, floor, and repair. Returns (rows, floored, repaired)."""
    sums = np.exp(logsumexp(raw, axis=1))
    bad = np.abs(sums - 1.0) > ROW_MASS_FILE_TOL
    if np.any(bad):
        row = int(np.argmax(bad))
        if strict:
            raise FormatError(f"{path}: record {example_id!r} {what} row {row} has mass "
                              f"{sums[row]!r}, outside 1 +/- {ROW_MASS_FILE_TOL}")
        logger.warning("%s: record %r %s row %d mass %r renormalized (lenient mode)",
                       path, example_id, what, row, sums[row])
        raw = np.where(bad[:, None], raw - logsumexp(raw, axis=1, keepdims=True), raw)
    floored_mask = raw < LOG_FLOOR
    n_floored = int(floored_mask.sum())
    rows = np.where(floored_mask, LOG_FLOOR, raw)
    sums = np.exp(logsumexp(rows, axis=1))
    drifted = np.abs(sums - 1.0) > ROW_SUM_TOL
    n_repaired = int(drifted.sum())
    if n_repaired:
        rows = np.where(drifted[:, None], rows - logsumexp(rows, axis=1, keepdims=True), rows)
    return rows, n_floored, n_repaired


def read_records(path: str | Path, strict: bool = True) -> list[PairRecord]:
    """Parse a record file into validated PairRecords.

    Strict mode raises on any row whose mass is off by more than 1e-4;
    lenient mode renormalizes and logs.
    """
    path = Path(path)
    header = read_header(path)
    v, k = header.vocab_size, header.top_k
    records: list[PairRecord] = []
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        reader.raw(4 + 4 + 4 + 4 + 4 + 8)  # past header
        for _ in range(header.record_count):
            example_id = reader.string()
            n_tokens = reader.u32()
            sentence = tuple(-1 if t == MASK_SENTINEL else int(t) for t in reader.u32s(n_tokens))
            pos_a, pos_b, gold_a, gold_b = (reader.u32() for _ in range(4))
            scheme_code = reader.u8()
            if scheme_code not in _SCHEME_NAMES:
                raise FormatError(f"{path}: record {example_id!r} has unknown scheme code {scheme_code}")
            token_distance = reader.u32()
            syntactic: Optional[int] = None
            if header.has_syntactic:
                raw_sd = reader.i32()
                syntactic = None if raw_sd < 0 else raw_sd

            raw_a, kept_a = _read_matrix(reader, v, k)
            logits_a = _read_logits_matrix(reader, v, k, kept_a) if header.has_logits else None
            raw_b, kept_b = _read_matrix(reader, v, k)
            logits_b = _read_logits_matrix(reader, v, k, kept_b) if header.has_logits else None
            raw_ma = reader.f32s(v)
            raw_mb = reader.f32s(v)

            rows_a, fl_a, rep_a = _prepare_rows(raw_a, strict, path, example_id, "cond_a_given_b")
            rows_b, fl_b, rep_b = _prepare_rows(raw_b, strict, path, example_id, "cond_b_given_a")
            rows_ma, fl_ma, _ = _prepare_rows(raw_ma[None, :], strict, path, example_id, "marg_a")
            rows_mb, fl_mb, _ = _prepare_rows(raw_mb[None, :], strict, path, example_id, "marg_b")

            record = PairRecord(
                example_id=example_id,
                sentence=sentence,
                pos_a=pos_a, pos_b=pos_b, gold_a=gold_a, gold_b=gold_b,
                scheme=_SCHEME_NAMES[scheme_code],
                cond_a_given_b=ConditionalTable(v, "a", "b", rows_a, logits=logits_a,
                                                floored_entries=fl_a),
                cond_b_given_a=ConditionalTable(v, "b", "a", rows_b, logits=logits_b,
                                                floored_entries=fl_b),
                marg_a=MarginalVector(v, "a", rows_ma[0], floored_entries=fl_ma),
                marg_b=MarginalVector(v, "b", rows_mb[0], floored_entries=fl_mb),
                token_distance=token_distance,
                syntactic_distance=syntactic,
            )
            if rep_a or rep_b:
                logger.warning("%s: record %r had %d rows repaired after flooring",
                               path, example_id, rep_a + rep_b)
            records.append(record)
        if not reader.at_end():
            raise FormatError(f"{path}: trailing bytes after {header.record_count} records")
    return records


# ---------------------------------------------------------------------------
# joint files

def write_joints(path: str | Path, joints: Sequence[tuple[str, JointTable]]) -> None:
    """Write (example_id, joint) pairs; all must share method and vocab."""
    path = Path(path)
    if joints:
        method = joints[0][1].method
        v = joints[0][1].vocab_size
        for example_id, joint in joints:
            if joint.method != method or joint.vocab_size != v:
                raise InputError(f"joint {example_id!r} mixes method/vocab in one file")
    else:
        method, v = "mlm", 0
    with open(path, "wb") as fh:
        fh.write(JOINT_MAGIC)
        fh.write(struct.pack("<IIBQ", FORMAT_VERSION, v, _METHOD_CODES[method], len(joints)))
        for example_id, joint in joints:
            _w_string(fh, example_id)
            fh.write(joint.log_joint.astype("<f4").tobytes())
            if joint.pivot is None:
                fh.write(b"\x00")
            else:
                fh.write(b"\x01")
                fh.write(struct.pack("<II", joint.pivot[0], joint.pivot[1]))
            if joint.iterations is None:
                fh.write(b"\x00")
            else:
                fh.write(b"\x01")
                _w_u32(fh, joint.iterations)


def read_joints(path: str | Path) -> list[tuple[str, JointTable]]:
    """Read a joint file; log joints are renormalized to unit mass."""
    path = Path(path)
    out: list[tuple[str, JointTable]] = []
    with open(path, "rb") as fh:
        reader = _Reader(fh, path)
        magic = reader.raw(4)
        if magic != JOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {JOINT_MAGIC!r}")
        version = reader.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        v = reader.u32()
        method_code = reader.u8()
        if method_code not in _METHOD_NAMES:
            raise FormatError(f"{path}: unknown method code {method_code}")
        method = _METHOD_NAMES[method_code]
        count = reader.u64()
        for _ in range(count):
            example_id = reader.string()
            log_joint = reader.f32s(v * v).reshape(v, v)
            log_joint = log_joint - logsumexp(log_joint)
            pivot = None
            if reader.u8():
                pivot = (reader.u32(), reader.u32())
            iterations = None
            if reader.u8():
                iterations = reader.u32()
            out.append((example_id, JointTable(v, method, log_joint, pivot=pivot,
                                               iterations=iterations)))
        if not reader.at_end():
            raise FormatError(f"{path}: trailing bytes after {count} joints")
    return out


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class Manifest:
    """Dataset description: corpus provenance plus the record files."""

    dataset: str
    corpus: str
    scheme: str
    model: str
    record_files: tuple[str, ...]
    params: dict[str, str] = field(default_factory=dict)

    def resolved_files(self, manifest_path: str | Path) -> list[Path]:
        base = Path(manifest_path).parent
        return [base / f for f in self.record_files]


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    lines = [
        f"dataset: {manifest.dataset}",
        f"corpus: {manifest.corpus}",
        f"scheme: {manifest.scheme}",
        f"model: {manifest.model}",
    ]
    lines += [f"record_file: {f}" for f in manifest.record_files]
    lines += [f"param.{k}: {v}" for k, v in sorted(manifest.params.items())]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path, validate: bool = True) -> Manifest:
    """Parse a manifest; with ``validate`` every record file must exist and
    carry a readable header with a consistent vocabulary size."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    fields: dict[str, str] = {}
    record_files: list[str] = []
    params: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise InputError(f"{path}:{lineno}: expected 'key: value', got {line!r}")
        key, value = key.strip(), value.strip()
        if key == "record_file":
            record_files.append(value)
        elif key.startswith("param."):
            params[key[len("param."):]] = value
        else:
            fields[key] = value
    missing = [k for k in ("dataset", "corpus", "scheme", "model") if k not in fields]
    if missing:
        raise InputError(f"{path}: missing manifest keys: {missing}")
    manifest = Manifest(dataset=fields["dataset"], corpus=fields["corpus"],
                        scheme=fields["scheme"], model=fields["model"],
                        record_files=tuple(record_files), params=params)
    if validate:
        if not manifest.record_files:
            raise InputError(f"{path}: manifest lists no record files")
        vocab = None
        for f in manifest.resolved_files(path):
            if not f.exists():
                raise InputError(f"{path}: referenced record file missing: {f}")
            header = read_header(f)
            if vocab is None:
                vocab = header.vocab_size
            elif header.vocab_size != vocab:
                raise InputError(f"{path}: record files disagree on vocabulary size "
                                 f"({vocab} vs {header.vocab_size} in {f})")
    return manifest


def read_manifest_records(path: str | Path, strict: bool = True) -> tuple[Manifest, list[PairRecord]]:
    """Manifest plus the concatenated records of all its files.

    Example ids must be unique across the dataset; downstream joins key on
    them.
    """
    manifest = read_manifest(path, validate=True)
    records: list[PairRecord] = []
    for f in manifest.resolved_files(path):
        records.extend(read_records(f, strict=strict))
    seen: set[str] = set()
    for record in records:
        if record.example_id in seen:
            raise InputError(f"duplicate example_id {record.example_id!r} across record files")
        seen.add(record.example_id)
    return manifest, records
