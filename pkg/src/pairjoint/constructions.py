"""Pairwise joint constructions from unary conditionals and marginals.

Five ways to turn MLM outputs at two masked positions into an explicit
joint over the pair:

* ``mlm_joint``      -- product of the two both-masked marginals.
* ``mrf_joint``      -- score(i, j) = log q(a=i|b=j) + log q(b=j|a=i), then
                        global normalization; the ``logits`` channel swaps in
                        raw scores for the log probabilities.
* ``hcb_joint``      -- Besag's ratio identity around a pivot completion;
                        exact whenever the conditionals are compatible.
* ``ag_joint``       -- the Arnold-Gokhale fixed-point iteration minimizing
                        the summed conditional KL to the inputs.

``ag_objective`` evaluates the quantity AG minimizes, for any candidate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .core import (
    ConditionalTable,
    InputError,
    JointTable,
    MarginalVector,
    NumericalError,
    kl_divergence,
    log_normalize,
    logsumexp,
    row_conditionals,
)

# Marginals are clipped here before taking reciprocals inside the AG update.
AG_MARGINAL_FLOOR = 1e-30


@dataclass(frozen=True)
class AGConfig:
    """Iteration controls for ``ag_joint``.

    ``convergence_tol`` bounds the max-abs entry change between successive
    joints; 0 disables early stopping.
    """

    max_iterations: int = 50
    convergence_tol: float = 1e-10
    track_objective: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InputError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.convergence_tol < 0:
            raise InputError(f"convergence_tol must be >= 0, got {self.convergence_tol}")


@dataclass(frozen=True)
class AGTrace:
    """What the AG iteration did: step count, convergence flag, and (when
    tracked) the objective value per iterate, starting at the uniform init."""

    iterations_run: int
    converged: bool
    objective_values: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.objective_values is not None:
            vals = tuple(float(v) for v in self.objective_values)
            object.__setattr__(self, "objective_values", vals)
            diffs = np.diff(vals)
            if len(diffs) and float(diffs.max()) > 1e-9:
                raise NumericalError(f"AG objective increased by {float(diffs.max()):.3e} during iteration")


def _require_same_vocab(*sizes: int) -> int:
    if len(set(sizes)) != 1:
        raise InputError(f"vocabulary sizes differ: {sizes}")
    return sizes[0]


def mlm_joint(marg_a: MarginalVector, marg_b: MarginalVector) -> JointTable:
    """Product joint of the both-masked marginals (conditionally independent)."""
    v = _require_same_vocab(marg_a.vocab_size, marg_b.vocab_size)
    scores = marg_a.log_probs[:, None] + marg_b.log_probs[None, :]
    return JointTable(v, "mlm", log_normalize(scores))


def mrf_joint(cond_a_given_b: ConditionalTable, cond_b_given_a: ConditionalTable,
              channel: Literal["probs", "logits"] = "probs") -> JointTable:
    """Joint proportional to the product of the two unary conditionals.

    With ``channel="logits"`` the unnormalized score is the sum of the raw
    unary logits instead; this drops the per-context softmax constants and
    generally yields a different joint.
    """
    v = _require_same_vocab(cond_a_given_b.vocab_size, cond_b_given_a.vocab_size)
    if channel == "probs":
        table_a, table_b = cond_a_given_b.log_probs, cond_b_given_a.log_probs
    elif channel == "logits":
        if cond_a_given_b.logits is None or cond_b_given_a.logits is None:
            raise InputError("logits channel requested but not present on both conditionals")
        table_a, table_b = cond_a_given_b.logits, cond_b_given_a.logits
    else:
        raise InputError(f"unknown channel {channel!r}")
    # [i, j] = score(a=i | b=j) + score(b=j | a=i)
    scores = table_a.T + table_b
    method = "mrf" if channel == "probs" else "mrf_logit"
    return JointTable(v, method, log_normalize(scores))


def hcb_pivot(mlm: JointTable) -> tuple[int, int]:
    """Mode of the product joint; ties break to the smallest (i, j)."""
    if mlm.method != "mlm":
        raise InputError(f"pivot selection expects the product joint, got method {mlm.method!r}")
    flat = int(np.argmax(mlm.log_joint))  # first max in C order = lexicographic smallest
    return flat // mlm.vocab_size, flat % mlm.vocab_size


def hcb_joint(cond_a_given_b: ConditionalTable, cond_b_given_a: ConditionalTable,
              pivot: tuple[int, int]) -> JointTable:
    """Joint reconstructed through Besag's identity around ``pivot``.

    With pivot (w'_a, w'_b) and position a ordered first:

        score(i, j) = log q(a=i|b=j) - log q(a=w'_a|b=j)
                    + log q(b=j|a=w'_a) - log q(b=w'_b|a=w'_a)

    The final term is constant and cancels under normalization; it is kept so
    the unnormalized scores match the ratio identity exactly. For compatible
    conditionals the result is the unique underlying joint, for any pivot.
    """
    v = _require_same_vocab(cond_a_given_b.vocab_size, cond_b_given_a.vocab_size)
    wa, wb = int(pivot[0]), int(pivot[1])
    if not (0 <= wa < v and 0 <= wb < v):
        raise InputError(f"pivot {pivot} out of range for V={v}")
    ta, tb = cond_a_given_b.log_probs, cond_b_given_a.log_probs
    scores = ta.T - ta[:, wa][None, :] + tb[wa, :][None, :] - tb[wa, wb]
    return JointTable(v, "hcb", log_normalize(scores), pivot=(wa, wb))


def ag_joint(cond_a_given_b: ConditionalTable, cond_b_given_a: ConditionalTable,
             config: AGConfig = AGConfig()) -> tuple[JointTable, AGTrace]:
    """Arnold-Gokhale fixed-point iteration toward the nearest-compatible joint.

    Starting from the uniform joint, each step rebuilds the iterate from the
    input conditionals and the current marginals:

        q'(i, j) ~ (q(a=i|b=j) + q(b=j|a=i)) / (1/q_a(i) + 1/q_b(j))

    followed by renormalization. Runs in linear space; marginals are clipped
    at AG_MARGINAL_FLOOR before the reciprocals. Stops at ``max_iterations``
    or when the max-abs entry change drops below ``convergence_tol``.
    """
    v = _require_same_vocab(cond_a_given_b.vocab_size, cond_b_given_a.vocab_size)
    # numerator[i, j] = q(a=i | b=j) + q(b=j | a=i); constant across iterations
    numerator = np.exp(cond_a_given_b.log_probs).T + np.exp(cond_b_given_a.log_probs)
    joint = np.full((v, v), 1.0 / (v * v))

    track = config.track_objective
    objectives: list[float] = []
    if track:
        objectives.append(_objective_linear(cond_a_given_b, cond_b_given_a, joint))

    iterations = 0
    converged = False
    for step in range(1, config.max_iterations + 1):
        pa = np.clip(joint.sum(axis=1), AG_MARGINAL_FLOOR, None)
        pb = np.clip(joint.sum(axis=0), AG_MARGINAL_FLOOR, None)
        new = numerator / (1.0 / pa[:, None] + 1.0 / pb[None, :])
        total = new.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise NumericalError(f"AG update produced non-finite mass at iteration {step}")
        new /= total
        delta = float(np.max(np.abs(new - joint)))
        joint = new
        iterations = step
        if track:
            objectives.append(_objective_linear(cond_a_given_b, cond_b_given_a, joint))
        if delta < config.convergence_tol:
            converged = True
            break

    result = JointTable(v, "ag", log_normalize(np.log(joint)), iterations=iterations)
    trace = AGTrace(iterations_run=iterations, converged=converged,
                    objective_values=tuple(objectives) if track else None)
    return result, trace


def ag_objective(cond_a_given_b: ConditionalTable, cond_b_given_a: ConditionalTable,
                 candidate: JointTable) -> float:
    """Summed conditional KL from the input conditionals to the candidate's.

    Sum over contexts j of KL(q(a|b=j) || cand(a|b=j)) plus the same in the
    other direction; unweighted over contexts. Zero iff the candidate's
    conditionals coincide with the inputs.
    """
    _require_same_vocab(cond_a_given_b.vocab_size, cond_b_given_a.vocab_size, candidate.vocab_size)
    derived_a = row_conditionals(candidate, "a_given_b")
    derived_b = row_conditionals(candidate, "b_given_a")
    term_a = kl_divergence(cond_a_given_b.log_probs, derived_a.log_probs).sum()
    term_b = kl_divergence(cond_b_given_a.log_probs, derived_b.log_probs).sum()
    return float(term_a + term_b)


def _objective_linear(cond_a_given_b: ConditionalTable, cond_b_given_a: ConditionalTable,
                      joint: np.ndarray) -> float:
    """ag_objective for a linear-space iterate without building a JointTable."""
    with np.errstate(divide="ignore"):
        log_joint = np.log(joint)
    la = (log_joint - logsumexp(log_joint, axis=0, keepdims=True)).T
    lb = log_joint - logsumexp(log_joint, axis=1, keepdims=True)
    term_a = kl_divergence(cond_a_given_b.log_probs, la).sum()
    term_b = kl_divergence(cond_b_given_a.log_probs, lb).sum()
    return float(term_a + term_b)


def derive_joint(record_cond_a, record_cond_b, marg_a, marg_b, method: str,
                 ag_config: AGConfig = AGConfig()) -> JointTable:
    """Dispatch one construction by name over a record's tables."""
    if method == "mlm":
        return mlm_joint(marg_a, marg_b)
    if method == "mrf":
        return mrf_joint(record_cond_a, record_cond_b, "probs")
    if method == "mrf_logit":
        return mrf_joint(record_cond_a, record_cond_b, "logits")
    if method == "hcb":
        return hcb_joint(record_cond_a, record_cond_b, hcb_pivot(mlm_joint(marg_a, marg_b)))
    if method == "ag":
        return ag_joint(record_cond_a, record_cond_b, ag_config)[0]
    raise InputError(f"unknown method {method!r}")
