"""Domain types and log-space numerics shared across the toolkit.

Everything downstream works on three immutable table types:

* ``ConditionalTable`` -- a row-stochastic V x V table; row ``j`` is the
  distribution of the target position given that the context position holds
  token ``j``.
* ``MarginalVector`` -- a length-V distribution for one position when both
  positions are masked.
* ``JointTable`` -- a normalized V x V joint over the two masked positions,
  stored in natural-log space.

All probability math runs in natural-log space with float64. Log tables are
floored at ``LOG_FLOOR`` (= log 1e-12) when built from raw data so that
ratio constructions never divide by zero; rows are renormalized only when
flooring (or upstream sloppiness) moved their mass away from 1 by more than
``ROW_SUM_TOL``, which keeps byte-exact file round trips intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

# Probability floor applied when tables are built from raw (e.g. float32) data.
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)

# Below this mass a distribution is treated as having no support at all.
MASS_FLOOR = 1e-300
LOG_MASS_FLOOR = math.log(MASS_FLOOR)

# In-memory rows must carry unit mass to this tolerance.
ROW_SUM_TOL = 1e-6

Position = Literal["a", "b"]
Direction = Literal["a_given_b", "b_given_a"]
Method = Literal["mlm", "mrf", "mrf_logit", "hcb", "ag", "truth"]
Scheme = Literal["random_pairs", "contiguous_pairs", "synthetic"]

METHODS: tuple[str, ...] = ("mlm", "mrf", "mrf_logit", "hcb", "ag")
SCHEMES: tuple[str, ...] = ("random_pairs", "contiguous_pairs", "synthetic")


class PairjointError(Exception):
    """Base class for all toolkit errors."""


class InputError(PairjointError):
    """Invalid user-supplied data: bad tables, manifests, files, or flags."""


class NumericalError(PairjointError):
    """A computation produced or encountered non-finite / degenerate values."""


class DegenerateConditioningError(NumericalError):
    """A conditioning token carries (numerically) zero mass in the joint."""


def logsumexp(x: np.ndarray, axis: int | None = None, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log(sum(exp(x))) along ``axis`` (all entries when None)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return out


def log_normalize(scores: np.ndarray) -> np.ndarray:
    """Shift a table of finite log scores so its exponentials sum to one.

    Raises:
        NumericalError: if any entry is not finite, naming its position.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        idx = np.unravel_index(int(np.argmin(np.isfinite(scores))), scores.shape)
        raise NumericalError(f"non-finite entry {scores[idx]!r} at position {tuple(int(i) for i in idx)}")
    return scores - logsumexp(scores)


def floor_log_rows(raw: np.ndarray) -> tuple[np.ndarray, int]:
    """Floor log-probability rows at LOG_FLOOR and repair drifted mass.

    Entries below the floor (including -inf) are raised to ``LOG_FLOOR``.
    A row is renormalized only when its total mass afterwards differs from 1
    by more than ``ROW_SUM_TOL``; rows already at unit mass pass through
    bit-exactly. Returns the floored array and the number of floored entries.

    Raises:
        InputError: on NaN entries.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if np.any(np.isnan(raw)):
        idx = np.unravel_index(int(np.argmax(np.isnan(raw))), raw.shape)
        raise InputError(f"NaN log probability at position {tuple(int(i) for i in idx)}")
    floored_mask = raw < LOG_FLOOR
    n_floored = int(floored_mask.sum())
    out = np.where(floored_mask, LOG_FLOOR, raw)
    sums = np.exp(logsumexp(out, axis=1))
    off = np.abs(sums - 1.0) > ROW_SUM_TOL
    if np.any(off):
        out = np.where(off[:, None], out - logsumexp(out, axis=1, keepdims=True), out)
    return out, n_floored


def kl_divergence(log_p: np.ndarray, log_q: np.ndarray, axis: int = -1) -> np.ndarray:
    """KL(p || q) = sum p*(log p - log q) along ``axis``, both in log space.

    Terms whose p-mass is below MASS_FLOOR are skipped, so fully floored
    tables never contribute spurious infinities.
    """
    log_p = np.asarray(log_p, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    keep = log_p >= LOG_MASS_FLOOR
    terms = np.where(keep, np.exp(log_p) * (log_p - log_q), 0.0)
    return terms.sum(axis=axis)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Vocabulary:
    """Token id space 0..size-1, with optional display strings."""

    size: int
    tokens: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.size < 2:
            raise InputError(f"vocabulary size must be >= 2, got {self.size}")
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(self.tokens))
            if len(self.tokens) != self.size:
                raise InputError(f"{len(self.tokens)} token strings for vocabulary of size {self.size}")
            if len(set(self.tokens)) != self.size:
                raise InputError("token strings must be unique")


@dataclass(frozen=True)
class ConditionalTable:
    """Row-stochastic table: ``log_probs[j][i]`` = log q(target=i | context=j).

    ``logits`` optionally carries the raw pre-normalization scores in the same
    [context][target] layout.
    """

    vocab_size: int
    target_position: Position
    context_position: Position
    log_probs: np.ndarray
    logits: Optional[np.ndarray] = None
    floored_entries: int = 0

    def __post_init__(self):
        if self.target_position == self.context_position:
            raise InputError("target and context positions must differ")
        lp = _frozen(self.log_probs)
        object.__setattr__(self, "log_probs", lp)
        v = self.vocab_size
        if lp.shape != (v, v):
            raise InputError(f"log_probs shape {lp.shape} != ({v}, {v})")
        if not np.all(np.isfinite(lp)):
            raise InputError("conditional table has non-finite log probabilities (floor the input first)")
        sums = np.exp(logsumexp(lp, axis=1))
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if np.any(bad):
            j = int(np.argmax(bad))
            raise InputError(f"conditional row {j} has mass {sums[j]!r}, outside 1 +/- {ROW_SUM_TOL}")
        if self.logits is not None:
            lg = _frozen(self.logits)
            object.__setattr__(self, "logits", lg)
            if lg.shape != (v, v):
                raise InputError(f"logits shape {lg.shape} != ({v}, {v})")
            if not np.all(np.isfinite(lg)):
                raise InputError("logits channel has non-finite entries")

    @classmethod
    def from_log_rows(cls, raw, target_position: Position, context_position: Position,
                      logits=None) -> "ConditionalTable":
        """Build from raw log rows, applying the floor-and-repair rule."""
        floored, n = floor_log_rows(raw)
        return cls(vocab_size=floored.shape[0], target_position=target_position,
                   context_position=context_position, log_probs=floored,
                   logits=None if logits is None else np.asarray(logits, dtype=np.float64),
                   floored_entries=n)

    @classmethod
    def from_probs(cls, probs, target_position: Position, context_position: Position,
                   logits=None) -> "ConditionalTable":
        """Build from linear-probability rows (zeros land on the floor)."""
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p < 0):
            raise InputError("negative probability entry")
        with np.errstate(divide="ignore"):
            return cls.from_log_rows(np.log(p), target_position, context_position, logits=logits)


@dataclass(frozen=True)
class MarginalVector:
    """Length-V distribution of one position with both positions masked."""

    vocab_size: int
    position: Position
    log_probs: np.ndarray
    floored_entries: int = 0

    def __post_init__(self):
        lp = _frozen(self.log_probs)
        object.__setattr__(self, "log_probs", lp)
        if lp.shape != (self.vocab_size,):
            raise InputError(f"marginal shape {lp.shape} != ({self.vocab_size},)")
        if not np.all(np.isfinite(lp)):
            raise InputError("marginal vector has non-finite log probabilities")
        total = float(np.exp(logsumexp(lp)))
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise InputError(f"marginal mass {total!r} outside 1 +/- {ROW_SUM_TOL}")

    @classmethod
    def from_log(cls, raw, position: Position) -> "MarginalVector":
        floored, n = floor_log_rows(np.asarray(raw, dtype=np.float64)[None, :])
        return cls(vocab_size=floored.shape[1], position=position,
                   log_probs=floored[0], floored_entries=n)

    @classmethod
    def from_probs(cls, probs, position: Position) -> "MarginalVector":
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p < 0):
            raise InputError("negative probability entry")
        with np.errstate(divide="ignore"):
            return cls.from_log(np.log(p), position)


# Total joint mass must match unity this tightly.
JOINT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class JointTable:
    """Normalized pairwise joint: ``log_joint[i][j]`` = log q(w_a=i, w_b=j).

    ``method`` records which construction produced it ("truth" marks a
    synthetic ground-truth joint). ``pivot`` is kept for HCB joints and
    ``iterations`` for AG joints.
    """

    vocab_size: int
    method: Method
    log_joint: np.ndarray
    pivot: Optional[tuple[int, int]] = None
    iterations: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS + ("truth",):
            raise InputError(f"unknown method tag {self.method!r}")
        lj = _frozen(self.log_joint)
        object.__setattr__(self, "log_joint", lj)
        v = self.vocab_size
        if lj.shape != (v, v):
            raise InputError(f"log_joint shape {lj.shape} != ({v}, {v})")
        if not np.all(np.isfinite(lj)):
            raise InputError("joint table has non-finite entries")
        total = float(np.exp(logsumexp(lj)))
        if abs(total - 1.0) > JOINT_SUM_TOL:
            raise InputError(f"joint mass {total!r} outside 1 +/- {JOINT_SUM_TOL}")
        if self.pivot is not None:
            object.__setattr__(self, "pivot", (int(self.pivot[0]), int(self.pivot[1])))
            if not all(0 <= t < v for t in self.pivot):
                raise InputError(f"pivot {self.pivot} out of range for V={v}")

    def marginal(self, position: Position) -> np.ndarray:
        """Log marginal of one position (lse over the other index)."""
        axis = 1 if position == "a" else 0
        return logsumexp(self.log_joint, axis=axis)


@dataclass(frozen=True)
class PairRecord:
    """One evaluation example: two masked positions with their conditionals.

    ``sentence`` holds context token ids with -1 marking the masked slots;
    synthetic records may use an empty sentence.
    """

    example_id: str
    sentence: tuple[int, ...]
    pos_a: int
    pos_b: int
    gold_a: int
    gold_b: int
    scheme: Scheme
    cond_a_given_b: ConditionalTable
    cond_b_given_a: ConditionalTable
    marg_a: MarginalVector
    marg_b: MarginalVector
    token_distance: int = field(default=-1)
    syntactic_distance: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "sentence", tuple(int(t) for t in self.sentence))
        if self.token_distance == -1:
            object.__setattr__(self, "token_distance", self.pos_b - self.pos_a)
        if self.scheme not in SCHEMES:
            raise InputError(f"unknown scheme {self.scheme!r}")
        v = self.cond_a_given_b.vocab_size
        parts = (self.cond_b_given_a.vocab_size, self.marg_a.vocab_size, self.marg_b.vocab_size)
        if any(p != v for p in parts):
            raise InputError(f"vocab sizes differ across tables: {(v,) + parts}")
        if not (0 <= self.gold_a < v and 0 <= self.gold_b < v):
            raise InputError(f"gold pair ({self.gold_a}, {self.gold_b}) outside vocabulary of size {v}")
        if self.pos_a >= self.pos_b:
            raise InputError(f"positions must satisfy pos_a < pos_b, got ({self.pos_a}, {self.pos_b})")
        if self.scheme != "synthetic":
            if self.token_distance != self.pos_b - self.pos_a or self.token_distance < 1:
                raise InputError(f"token_distance {self.token_distance} inconsistent with positions "
                                 f"({self.pos_a}, {self.pos_b})")
        if self.syntactic_distance is not None and self.syntactic_distance < 0:
            raise InputError("syntactic_distance must be non-negative")
        if self.cond_a_given_b.target_position != "a" or self.cond_b_given_a.target_position != "b":
            raise InputError("conditional tables attached under the wrong direction")

    @property
    def vocab_size(self) -> int:
        return self.cond_a_given_b.vocab_size

    @property
    def has_logits(self) -> bool:
        return self.cond_a_given_b.logits is not None and self.cond_b_given_a.logits is not None

    @property
    def floored_entries(self) -> int:
        return (self.cond_a_given_b.floored_entries + self.cond_b_given_a.floored_entries
                + self.marg_a.floored_entries + self.marg_b.floored_entries)


def row_conditionals(joint: JointTable, direction: Direction) -> ConditionalTable:
    """Unary conditionals of a joint, in [context][target] layout.

    ``b_given_a`` normalizes each row i of the joint; ``a_given_b``
    normalizes each column j. A conditioning token whose total mass falls
    below MASS_FLOOR has no well-defined conditional and is rejected.
    """
    lj = joint.log_joint
    if direction == "b_given_a":
        mass = logsumexp(lj, axis=1)
        _check_conditioning_mass(mass, direction, "a")
        table = lj - mass[:, None]
        return ConditionalTable(joint.vocab_size, "b", "a", table)
    if direction == "a_given_b":
        mass = logsumexp(lj, axis=0)
        _check_conditioning_mass(mass, direction, "b")
        table = (lj - mass[None, :]).T
        return ConditionalTable(joint.vocab_size, "a", "b", table)
    raise InputError(f"unknown direction {direction!r}")


def _check_conditioning_mass(log_mass: np.ndarray, direction: str, position: str) -> None:
    bad = log_mass < LOG_MASS_FLOOR
    if np.any(bad):
        tok = int(np.argmax(bad))
        raise DegenerateConditioningError(
            f"{direction}: conditioning token {tok} at position {position} has mass below {MASS_FLOOR}")
