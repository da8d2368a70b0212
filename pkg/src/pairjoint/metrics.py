"""Evaluation of derived joints: perplexities, faithfulness, distance buckets.

Per example with gold pair (g_a, g_b) and derived joint q':

* pairwise log probability  log q'(g_a, g_b)            -> P-PPL
* unary log probabilities   log q'(a=g_a | b=g_b) and
                            log q'(b=g_b | a=g_a)       -> U-PPL
* faithfulness              KL from the record's conditionals to the
                            derived ones, averaged over every context
                            (A-KL) or only the gold contexts (G-KL)

Dataset aggregation over N examples:

    U-PPL = exp(-sum(unary log probs) / 2N)
    P-PPL = exp(-sum(pair  log probs) / 2N)
    A-KL  = mean over examples of the per-example contribution, which is
            itself the context sum divided by 2V
    G-KL  = mean over examples of (KL@gold_b + KL@gold_a) / 2

PNLL (pairwise negative log likelihood) is -log q'(gold pair) / 2, the
per-example log of P-PPL; distance analysis reports its mean per exact
integer distance bucket.

All perplexities and KLs use natural logarithms.
"""

from __future__ import annotations

import csv
import io as _stdio
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .core import InputError, JointTable, PairRecord, kl_divergence, row_conditionals

DistanceKind = Literal["token", "syntactic"]


@dataclass(frozen=True)
class ExampleScores:
    """Per-example metric contributions for one construction."""

    example_id: str
    method: str
    log_pair_prob: float
    log_unary_a_given_b: float
    log_unary_b_given_a: float
    akl_contrib: float
    gkl_contrib: float
    token_distance: int
    syntactic_distance: Optional[int] = None

    def __post_init__(self):
        if self.log_pair_prob > 1e-12 or self.log_unary_a_given_b > 1e-12 or self.log_unary_b_given_a > 1e-12:
            raise InputError("log probabilities must be <= 0")
        if self.akl_contrib < -1e-12 or self.gkl_contrib < -1e-12:
            raise InputError("KL contributions must be non-negative")

    @property
    def pnll(self) -> float:
        return -0.5 * self.log_pair_prob


@dataclass(frozen=True)
class MetricsReport:
    """Dataset-level metrics for one construction."""

    method: str
    n_examples: int
    u_ppl: float
    p_ppl: float
    a_kl: float
    g_kl: float
    per_bucket: dict[int, tuple[int, float]]  # distance -> (count, mean PNLL)

    def __post_init__(self):
        if self.u_ppl < 1.0 - 1e-12 or self.p_ppl < 1.0 - 1e-12:
            raise InputError("perplexities over normalized joints cannot drop below 1")
        if sum(c for c, _ in self.per_bucket.values()) != self.n_examples:
            raise InputError("bucket counts do not sum to the number of examples")


def score_example(record: PairRecord, joint: JointTable,
                  use_original_unaries: bool = False) -> ExampleScores:
    """Score one record against one derived joint.

    ``use_original_unaries`` substitutes the record's own conditionals for the
    joint-derived ones in the unary terms; it is only meaningful (and only
    allowed) for the product-of-marginals construction, whose derived
    conditionals ignore the conditioning token.
    """
    if record.vocab_size != joint.vocab_size:
        raise InputError(f"record V={record.vocab_size} but joint V={joint.vocab_size}")
    if use_original_unaries and joint.method != "mlm":
        raise InputError("use_original_unaries applies to the mlm construction only")

    ga, gb = record.gold_a, record.gold_b
    log_pair = float(joint.log_joint[ga, gb])

    derived_a = row_conditionals(joint, "a_given_b")
    derived_b = row_conditionals(joint, "b_given_a")
    if use_original_unaries:
        unary_a = float(record.cond_a_given_b.log_probs[gb, ga])
        unary_b = float(record.cond_b_given_a.log_probs[ga, gb])
    else:
        unary_a = float(derived_a.log_probs[gb, ga])
        unary_b = float(derived_b.log_probs[ga, gb])

    kl_a = kl_divergence(record.cond_a_given_b.log_probs, derived_a.log_probs)
    kl_b = kl_divergence(record.cond_b_given_a.log_probs, derived_b.log_probs)
    v = record.vocab_size
    akl = float(kl_a.sum() + kl_b.sum()) / (2.0 * v)
    gkl = float(kl_a[gb] + kl_b[ga]) / 2.0

    return ExampleScores(
        example_id=record.example_id,
        method=joint.method,
        log_pair_prob=min(log_pair, 0.0),
        log_unary_a_given_b=min(unary_a, 0.0),
        log_unary_b_given_a=min(unary_b, 0.0),
        akl_contrib=max(akl, 0.0),
        gkl_contrib=max(gkl, 0.0),
        token_distance=record.token_distance,
        syntactic_distance=record.syntactic_distance,
    )


def aggregate(scores: Sequence[ExampleScores]) -> MetricsReport:
    """Reduce per-example scores to one report.

    Summation runs in example_id order so reports are bit-stable regardless
    of how the scores were produced.
    """
    if not scores:
        raise InputError("cannot aggregate an empty score list")
    methods = {s.method for s in scores}
    if len(methods) != 1:
        raise InputError(f"mixed methods in one aggregation: {sorted(methods)}")
    ordered = sorted(scores, key=lambda s: s.example_id)
    n = len(ordered)

    pair_sum = float(np.sum([s.log_pair_prob for s in ordered]))
    unary_sum = float(np.sum([s.log_unary_a_given_b + s.log_unary_b_given_a for s in ordered]))
    a_kl = float(np.sum([s.akl_contrib for s in ordered])) / n
    g_kl = float(np.sum([s.gkl_contrib for s in ordered])) / n

    buckets: dict[int, tuple[int, float]] = {}
    for dist in sorted({s.token_distance for s in ordered}):
        members = [s.pnll for s in ordered if s.token_distance == dist]
        buckets[dist] = (len(members), float(np.mean(members)))

    return MetricsReport(
        method=ordered[0].method,
        n_examples=n,
        u_ppl=float(np.exp(-unary_sum / (2.0 * n))),
        p_ppl=float(np.exp(-pair_sum / (2.0 * n))),
        a_kl=a_kl,
        g_kl=g_kl,
        per_bucket=buckets,
    )


@dataclass(frozen=True)
class DistanceBucket:
    method: str
    distance: int
    count: int
    mean_pnll: float
    merged_tail: bool = False


def distance_analysis(scores: Sequence[ExampleScores], kind: DistanceKind = "token",
                      merge_tail_below: int = 0) -> list[DistanceBucket]:
    """Mean PNLL per exact integer distance, per method.

    ``merge_tail_below`` > 0 collapses trailing buckets (largest distances
    first) whose counts fall short of that many examples into a single bucket
    labeled with the smallest merged distance.
    """
    if kind not in ("token", "syntactic"):
        raise InputError(f"unknown distance kind {kind!r}")
    if kind == "syntactic":
        missing = [s.example_id for s in scores if s.syntactic_distance is None]
        if missing:
            raise InputError(f"syntactic distance requested but absent on {len(missing)} "
                             f"examples (first: {missing[0]})")

    def dist(s: ExampleScores) -> int:
        return s.token_distance if kind == "token" else s.syntactic_distance

    rows: list[DistanceBucket] = []
    for method in sorted({s.method for s in scores}):
        mine = [s for s in scores if s.method == method]
        per_d: dict[int, list[float]] = {}
        for s in mine:
            per_d.setdefault(dist(s), []).append(s.pnll)
        items = sorted(per_d.items())
        if merge_tail_below > 0:
            tail: list[float] = []
            tail_min = None
            while items and len(items[-1][1]) < merge_tail_below:
                d, vals = items.pop()
                tail = vals + tail
                tail_min = d
            if tail:
                rows_tail = DistanceBucket(method, tail_min, len(tail), float(np.mean(tail)), merged_tail=True)
            else:
                rows_tail = None
        else:
            rows_tail = None
        for d, vals in items:
            rows.append(DistanceBucket(method, d, len(vals), float(np.mean(vals))))
        if rows_tail is not None:
            rows.append(rows_tail)
    return rows


# ---------------------------------------------------------------------------
# serialization: key-value text blocks and CSV tables

def report_to_text(report: MetricsReport) -> str:
    """Field-per-line `key: value` block; floats at full repr precision."""
    lines = [
        f"method: {report.method}",
        f"n_examples: {report.n_examples}",
        f"u_ppl: {report.u_ppl!r}",
        f"p_ppl: {report.p_ppl!r}",
        f"a_kl: {report.a_kl!r}",
        f"g_kl: {report.g_kl!r}",
    ]
    for dist in sorted(report.per_bucket):
        count, pnll = report.per_bucket[dist]
        lines.append(f"bucket.{dist}.count: {count}")
        lines.append(f"bucket.{dist}.mean_pnll: {pnll!r}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> MetricsReport:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    buckets: dict[int, tuple[int, float]] = {}
    for key, value in fields.items():
        if key.startswith("bucket.") and key.endswith(".count"):
            d = int(key.split(".")[1])
            buckets[d] = (int(value), float(fields[f"bucket.{d}.mean_pnll"]))
    return MetricsReport(
        method=fields["method"],
        n_examples=int(fields["n_examples"]),
        u_ppl=float(fields["u_ppl"]),
        p_ppl=float(fields["p_ppl"]),
        a_kl=float(fields["a_kl"]),
        g_kl=float(fields["g_kl"]),
        per_bucket=buckets,
    )


METRIC_NAMES = ("u_ppl", "p_ppl", "a_kl", "g_kl")


def metrics_table(reports: Iterable[MetricsReport], scheme: str) -> str:
    """CSV with one row per (method, metric)."""
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scheme", "method", "metric", "value"])
    for report in reports:
        for name in METRIC_NAMES:
            writer.writerow([scheme, report.method, name, repr(getattr(report, name))])
    return buf.getvalue()


def read_metrics_table(path: str | Path) -> dict[tuple[str, str, str], float]:
    """Parse the CSV written by ``metrics_table`` into
    {(scheme, method, metric): value}."""
    out: dict[tuple[str, str, str], float] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[(row["scheme"], row["method"], row["metric"])] = float(row["value"])
    return out


def distance_table(buckets: Iterable[DistanceBucket], kind: DistanceKind) -> str:
    """CSV with one row per (method, distance) bucket."""
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "method", "distance", "count", "mean_pnll", "merged_tail"])
    for b in buckets:
        writer.writerow([kind, b.method, b.distance, b.count, repr(b.mean_pnll), int(b.merged_tail)])
    return buf.getvalue()
