"""Run a masked LM over corpus sentences to fill pairwise conditional tables.

For a sentence with masked positions (a, b), one record needs:

* the both-masked pass (marginal vectors at a and b),
* V passes with a masked and b swept over every candidate filler
  (rows of the a-given-b table), and
* V passes with the roles swapped.

Candidate passes are batched; log probabilities come straight from the
model's log-softmax and the logits channel keeps the raw pre-softmax scores.
Example selection draws from a Philox-keyed stream (key = (seed, 0)), so a
job is reproducible end to end: one uniform pair per random-pair selection,
one uniform per contiguous selection, drawn per accepted sentence in corpus
order; too-short sentences are skipped without consuming the stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .records import ExtractedRecord, TruncatedMatrix, top_k_indices, write_records

logger = logging.getLogger(__name__)


@dataclass
class ExtractionJob:
    model: str
    corpus: Path
    scheme: str = "contiguous_pairs"
    count: int = 100
    seed: int = 0
    top_k: int = 0
    batch_size: int = 16
    device: str = "cpu"
    max_length: int = 128
    out: Path = Path("records.pjr")

    def __post_init__(self):
        if self.scheme not in ("random_pairs", "contiguous_pairs"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


class ExtractionError(RuntimeError):
    pass


def load_model(label: str, device: str = "cpu"):
    from transformers import AutoModelForMaskedLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(label)
    model = AutoModelForMaskedLM.from_pretrained(label).to(device).eval()
    return model, tokenizer


def _sequence_special_ids(tokenizer) -> set[int]:
    """Sequence-delimiter specials are never maskable; everything else is."""
    ids = {tokenizer.cls_token_id, tokenizer.sep_token_id, tokenizer.pad_token_id,
           getattr(tokenizer, "bos_token_id", None), getattr(tokenizer, "eos_token_id", None)}
    return {i for i in ids if i is not None}


def _eligible_positions(ids: list[int], specials: set[int]) -> list[int]:
    return [i for i, tok in enumerate(ids) if tok not in specials]


def _masked_logits(model, batch_ids: torch.Tensor, position: int) -> torch.Tensor:
    """Raw logits at one position for a batch of inputs."""
    with torch.no_grad():
        out = model(input_ids=batch_ids, attention_mask=torch.ones_like(batch_ids))
    return out.logits[:, position, :]


def conditional_table(model, ids: list[int], target_pos: int, context_pos: int,
                      mask_id: int, vocab_size: int, batch_size: int, device: str,
                      top_k: int = 0):
    """Sweep every candidate filler of ``context_pos``; distribution read at
    the masked ``target_pos``. Returns (log_probs, raw_logits) in
    [context][target] layout, dense float32 arrays, or TruncatedMatrix pairs
    when ``top_k`` bounds memory (rows reduced as they are computed)."""
    base = torch.tensor(ids, dtype=torch.long, device=device)
    base = base.clone()
    base[target_pos] = mask_id
    sparse = 0 < top_k < vocab_size
    if sparse:
        kept_idx = np.empty((vocab_size, top_k), dtype=np.int64)
        kept_logp = np.empty((vocab_size, top_k), dtype=np.float32)
        kept_raw = np.empty((vocab_size, top_k), dtype=np.float32)
    else:
        log_rows = np.empty((vocab_size, vocab_size), dtype=np.float32)
        logit_rows = np.empty((vocab_size, vocab_size), dtype=np.float32)
    for start in range(0, vocab_size, batch_size):
        candidates = torch.arange(start, min(start + batch_size, vocab_size), device=device)
        batch = base.unsqueeze(0).repeat(len(candidates), 1)
        batch[:, context_pos] = candidates
        logits = _masked_logits(model, batch, target_pos)
        log_probs = torch.log_softmax(logits.double(), dim=-1)
        chunk_logp = log_probs.cpu().numpy().astype(np.float32)
        chunk_raw = logits.cpu().numpy().astype(np.float32)
        if sparse:
            for offset in range(len(candidates)):
                idx = top_k_indices(chunk_logp[offset], top_k)
                row = start + offset
                kept_idx[row] = idx
                kept_logp[row] = chunk_logp[offset][idx]
                kept_raw[row] = chunk_raw[offset][idx]
        else:
            log_rows[start:start + len(candidates)] = chunk_logp
            logit_rows[start:start + len(candidates)] = chunk_raw
    if sparse:
        return (TruncatedMatrix(kept_idx, kept_logp), TruncatedMatrix(kept_idx, kept_raw))
    return log_rows, logit_rows


def marginal_vectors(model, ids: list[int], pos_a: int, pos_b: int, mask_id: int,
                     device: str) -> tuple[np.ndarray, np.ndarray]:
    """Both-masked pass: the model's output at each position."""
    both = torch.tensor(ids, dtype=torch.long, device=device).clone()
    both[pos_a] = mask_id
    both[pos_b] = mask_id
    with torch.no_grad():
        out = model(input_ids=both.unsqueeze(0), attention_mask=torch.ones(1, len(ids),
                                                                           dtype=torch.long,
                                                                           device=device))
    log_probs = torch.log_softmax(out.logits[0].double(), dim=-1)
    return (log_probs[pos_a].cpu().numpy().astype(np.float32),
            log_probs[pos_b].cpu().numpy().astype(np.float32))


def _select_pair(rng, eligible: list[int], scheme: str) -> Optional[tuple[int, int]]:
    if scheme == "random_pairs":
        if len(eligible) < 2:
            return None
        u = (rng.random_raw(2) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        first = int(u[0] * len(eligible))
        rest = [p for i, p in enumerate(eligible) if i != first]
        second = rest[int(u[1] * len(rest))]
        a, b = eligible[first], second
        return (a, b) if a < b else (b, a)
    adjacent = [(p, q) for p, q in zip(eligible, eligible[1:]) if q == p + 1]
    if not adjacent:
        return None
    u = (rng.random_raw(1) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    return adjacent[int(u[0] * len(adjacent))]


def extract(job: ExtractionJob, model=None, tokenizer=None) -> Path:
    """Produce a record file (and manifest) for ``job``.

    ``model``/``tokenizer`` may be passed preloaded; otherwise they are
    resolved from the job's model label.
    """
    if model is None or tokenizer is None:
        model, tokenizer = load_model(job.model, job.device)
    mask_id = tokenizer.mask_token_id
    if mask_id is None:
        raise ExtractionError(f"model {job.model!r} has no mask token")
    vocab_size = int(model(input_ids=torch.tensor([[mask_id]]),
                           attention_mask=torch.tensor([[1]])).logits.shape[-1])
    specials = _sequence_special_ids(tokenizer)
    bits = np.random.Philox(key=np.array([job.seed, 0], dtype=np.uint64))

    records: list[ExtractedRecord] = []
    n_skipped = 0
    with open(job.corpus) as fh:
        for line_no, line in enumerate(fh):
            if len(records) >= job.count:
                break
            text = line.strip()
            if not text:
                continue
            ids = tokenizer(text, truncation=True, max_length=job.max_length)["input_ids"]
            if len(ids) < 4:
                n_skipped += 1
                logger.info("corpus line %d: %d tokens, too short, skipped", line_no, len(ids))
                continue
            pair = _select_pair(bits, _eligible_positions(ids, specials), job.scheme)
            if pair is None:
                n_skipped += 1
                logger.info("corpus line %d: no maskable pair under %s, skipped",
                            line_no, job.scheme)
                continue
            pos_a, pos_b = pair
            gold_a, gold_b = ids[pos_a], ids[pos_b]

            try:
                marg_a, marg_b = marginal_vectors(model, ids, pos_a, pos_b, mask_id, job.device)
                cond_a, logits_a = conditional_table(model, ids, pos_a, pos_b, mask_id,
                                                     vocab_size, job.batch_size, job.device,
                                                     top_k=job.top_k)
                cond_b, logits_b = conditional_table(model, ids, pos_b, pos_a, mask_id,
                                                     vocab_size, job.batch_size, job.device,
                                                     top_k=job.top_k)
            except (MemoryError, torch.cuda.OutOfMemoryError) as exc:
                raise ExtractionError(
                    f"out of memory holding V={vocab_size} tables; rerun with --top-k "
                    f"(e.g. 1024) and/or a smaller --batch-size") from exc
            sentence = list(ids)
            sentence[pos_a] = -1
            sentence[pos_b] = -1
            records.append(ExtractedRecord(
                example_id=f"{job.scheme}-{job.seed}-{len(records):05d}",
                sentence=sentence, pos_a=pos_a, pos_b=pos_b,
                gold_a=gold_a, gold_b=gold_b, scheme=job.scheme,
                token_distance=pos_b - pos_a,
                cond_a_given_b=cond_a, cond_b_given_a=cond_b,
                marg_a=marg_a, marg_b=marg_b,
                logits_a=logits_a, logits_b=logits_b))

    if len(records) < job.count:
        raise ExtractionError(
            f"corpus exhausted after {len(records)}/{job.count} records "
            f"({n_skipped} sentences skipped)")
    job.out.parent.mkdir(parents=True, exist_ok=True)
    write_records(records, job.out, top_k=job.top_k)
    return job.out


def write_job_manifest(job: ExtractionJob, manifest_path: Path, corpus_label: str,
                       dataset: str) -> None:
    lines = [
        f"dataset: {dataset}",
        f"corpus: {corpus_label}",
        f"scheme: {job.scheme}",
        f"model: {job.model}",
        f"record_file: {job.out.name}",
        f"param.count: {job.count}",
        f"param.seed: {job.seed}",
        f"param.top_k: {job.top_k}",
        f"param.batch_size: {job.batch_size}",
    ]
    manifest_path.write_text("\n".join(lines) + "\n")


def masked_pair_conditional(model, tokenizer, text: str, known: str, known_slot: int = 0,
                            device: str = "cpu") -> np.ndarray:
    """Distribution at the remaining masked slot of a two-mask sentence after
    filling the other slot with ``known``.

    ``known_slot`` selects which of the sentence's two mask tokens (in
    reading order) receives the known word.
    """
    ids = tokenizer(text)["input_ids"]
    mask_positions = [i for i, t in enumerate(ids) if t == tokenizer.mask_token_id]
    if len(mask_positions) != 2:
        raise ExtractionError(f"expected exactly 2 mask tokens, found {len(mask_positions)}")
    known_ids = tokenizer(known, add_special_tokens=False)["input_ids"]
    if len(known_ids) != 1:
        raise ExtractionError(f"known filler {known!r} is not a single token")
    filled = list(ids)
    filled[mask_positions[known_slot]] = known_ids[0]
    target = mask_positions[1 - known_slot]
    batch = torch.tensor([filled], dtype=torch.long, device=device)
    with torch.no_grad():
        out = model(input_ids=batch, attention_mask=torch.ones_like(batch))
    return torch.log_softmax(out.logits[0, target].double(), dim=-1).cpu().numpy()
