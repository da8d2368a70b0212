"""Compatibility checking and synthetic ground-truth instances.

A pair of strictly positive conditionals q(a|b), q(b|a) admits a common
joint exactly when the log-ratio matrix

    M[i, j] = log q(a=i | b=j) - log q(b=j | a=i)

separates as f(i) + g(j)  (take f = log of the joint's a-marginal and
g = -log of its b-marginal to see why). ``check_compatibility`` measures the
failure of that separation by double-centering M and reporting the residual.

Synthetic instances provide the brute-force oracle for all of this: a joint
drawn from a symmetric Dirichlet, its exact conditionals, and optionally a
multiplicative perturbation that breaks compatibility by a known amount.

Reproducibility note: instance generation must be replayable across
implementations, so it avoids the host RNG entirely. ``DeterministicSampler``
documents the exact algorithm: a Philox4x64-10 counter-based bit generator
keyed by (seed, stream); uniforms take the top 53 bits of each 64-bit word;
normals come from Box-Muller pairs on (1-u1, u2); gamma variates use
Marsaglia-Tsang squeeze rejection (with the u^(1/shape) boost below shape 1);
Dirichlet draws are normalized gamma vectors clipped at 1e-300. Batched
rejection draws exactly the still-needed count per round, so the consumed
stream is a pure function of the requested sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ConditionalTable,
    InputError,
    JointTable,
    log_normalize,
)


class DeterministicSampler:
    """Fixed, documented random stream (see module docstring)."""

    def __init__(self, seed: int, stream: int = 0):
        self._bits = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))

    def _words(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1): top 53 bits of each word over 2^53."""
        return (self._words(n) >> np.uint64(11)) * (1.0 / 9007199254740992.0)

    def normals(self, n: int) -> np.ndarray:
        """Box-Muller: r = sqrt(-2 ln(1-u1)); pairs (r cos, r sin)(2 pi u2)."""
        pairs = (n + 1) // 2
        u1 = self.uniforms(pairs)
        u2 = self.uniforms(pairs)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def gammas(self, shape: float, n: int) -> np.ndarray:
        """Marsaglia-Tsang gamma(shape) variates, unit scale."""
        if shape <= 0:
            raise InputError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            boost = np.maximum(self.uniforms(n), 2.0 ** -53)
            return self.gammas(shape + 1.0, n) * boost ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        out = np.empty(n, dtype=np.float64)
        filled = 0
        while filled < n:
            need = n - filled
            x = self.normals(need)
            u = self.uniforms(need)
            v = (1.0 + c * x) ** 3
            ok = v > 0
            with np.errstate(invalid="ignore", divide="ignore"):
                squeeze = u < 1.0 - 0.0331 * x**4
                full = np.log(np.maximum(u, 1e-320)) < 0.5 * x * x + d * (1.0 - v + np.log(np.where(ok, v, 1.0)))
            accept = ok & (squeeze | full)
            got = (d * v)[accept]
            out[filled:filled + got.size] = got
            filled += got.size
        return out

    def dirichlet(self, n: int, concentration: float) -> np.ndarray:
        g = np.clip(self.gammas(concentration, n), 1e-300, None)
        return g / g.sum()

    def index(self, probs: np.ndarray) -> int:
        """One draw from a discrete distribution by inverse CDF on one uniform."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.uniforms(1)[0] * cdf[-1]
        return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


@dataclass(frozen=True)
class SyntheticInstance:
    """A known small-V joint and its (optionally perturbed) conditionals."""

    vocab_size: int
    true_joint: JointTable
    cond_a_given_b: ConditionalTable
    cond_b_given_a: ConditionalTable
    perturbed: bool
    seed: int


@dataclass(frozen=True)
class CompatReport:
    """Double-centering residuals of the log-ratio matrix."""

    residual_max: float
    residual_frobenius: float
    compatible: bool
    tolerance: float


def check_compatibility(cond_a_given_b: ConditionalTable, cond_b_given_a: ConditionalTable,
                        tolerance: float = 1e-6) -> CompatReport:
    """Residual of M[i,j] = log q(a=i|b=j) - log q(b=j|a=i) after removing
    row means, column means, and adding back the grand mean.

    The residual is identically zero (up to rounding) iff the pair is
    compatible; ``compatible`` is the max-abs residual tested against
    ``tolerance``.
    """
    if tolerance < 0:
        raise InputError(f"tolerance must be non-negative, got {tolerance}")
    if cond_a_given_b.vocab_size != cond_b_given_a.vocab_size:
        raise InputError("conditionals have different vocabulary sizes")
    m = cond_a_given_b.log_probs.T - cond_b_given_a.log_probs
    residual = m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()
    rmax = float(np.abs(residual).max())
    rfro = float(np.sqrt((residual**2).sum()))
    return CompatReport(residual_max=rmax, residual_frobenius=rfro,
                        compatible=rmax <= tolerance, tolerance=tolerance)


def exact_conditionals(joint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row/column normalizations of a linear-space joint, in [context][target]
    layout: (q(a|b) with rows indexed by b, q(b|a) with rows indexed by a)."""
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    cond_a = (joint / pb[None, :]).T
    cond_b = joint / pa[:, None]
    return cond_a, cond_b


def gen_synthetic(vocab_size: int, seed: int, concentration: float = 1.0,
                  perturb_scale: float = 0.0) -> SyntheticInstance:
    """Draw a strictly positive joint and its conditionals, deterministically.

    The joint is symmetric-Dirichlet over the V*V cells. With
    ``perturb_scale`` s > 0, each conditional entry is multiplied by exp(eta),
    eta uniform on [-s, s] (the q(a|b) table's noise is drawn first, then
    q(b|a)'s), and rows are renormalized; the instance is then flagged
    ``perturbed`` and is incompatible for all but measure-zero draws.
    """
    if vocab_size < 2:
        raise InputError(f"vocab_size must be >= 2, got {vocab_size}")
    if concentration <= 0:
        raise InputError(f"concentration must be positive, got {concentration}")
    if perturb_scale < 0:
        raise InputError(f"perturb_scale must be non-negative, got {perturb_scale}")
    sampler = DeterministicSampler(seed, stream=0)
    v = vocab_size
    joint = sampler.dirichlet(v * v, concentration).reshape(v, v)
    true_joint = JointTable(v, "truth", log_normalize(np.log(joint)))
    cond_a, cond_b = exact_conditionals(joint)

    perturbed = perturb_scale > 0
    if perturbed:
        eta_a = perturb_scale * (2.0 * sampler.uniforms(v * v).reshape(v, v) - 1.0)
        eta_b = perturb_scale * (2.0 * sampler.uniforms(v * v).reshape(v, v) - 1.0)
        cond_a = cond_a * np.exp(eta_a)
        cond_a /= cond_a.sum(axis=1, keepdims=True)
        cond_b = cond_b * np.exp(eta_b)
        cond_b /= cond_b.sum(axis=1, keepdims=True)

    with np.errstate(divide="ignore"):
        table_a = ConditionalTable(v, "a", "b", np.log(cond_a))
        table_b = ConditionalTable(v, "b", "a", np.log(cond_b))
    return SyntheticInstance(vocab_size=v, true_joint=true_joint, cond_a_given_b=table_a,
                             cond_b_given_a=table_b, perturbed=perturbed, seed=seed)


def synthetic_record(instance: SyntheticInstance, example_id: str,
                     with_logits: bool = True):
    """Package a SyntheticInstance as an evaluation record.

    Uses the instance seed on stream 1 of the documented sampler, drawing in
    this order: one uniform for the gold pair (inverse CDF over the flattened
    true joint), one uniform for the token distance (uniform over 1..5), then
    V row shifts per conditional table when the logits channel is requested
    (logits = log probs + a per-context constant uniform on [-1, 1], mimicking
    the softmax's dropped normalizer). Marginals come from the true joint.
    """
    from .core import MarginalVector, PairRecord  # local import to avoid cycle noise

    v = instance.vocab_size
    sampler = DeterministicSampler(instance.seed, stream=1)
    probs = np.exp(instance.true_joint.log_joint).ravel()
    flat = sampler.index(probs)
    gold_a, gold_b = divmod(flat, v)
    distance = 1 + min(int(sampler.uniforms(1)[0] * 5.0), 4)

    cond_a, cond_b = instance.cond_a_given_b, instance.cond_b_given_a
    if with_logits:
        shift_a = 2.0 * sampler.uniforms(v) - 1.0
        shift_b = 2.0 * sampler.uniforms(v) - 1.0
        cond_a = ConditionalTable(v, "a", "b", cond_a.log_probs,
                                  logits=cond_a.log_probs + shift_a[:, None])
        cond_b = ConditionalTable(v, "b", "a", cond_b.log_probs,
                                  logits=cond_b.log_probs + shift_b[:, None])

    return PairRecord(
        example_id=example_id,
        sentence=(),
        pos_a=0, pos_b=distance,
        gold_a=gold_a, gold_b=gold_b,
        scheme="synthetic",
        cond_a_given_b=cond_a,
        cond_b_given_a=cond_b,
        marg_a=MarginalVector.from_log(instance.true_joint.marginal("a"), "a"),
        marg_b=MarginalVector.from_log(instance.true_joint.marginal("b"), "b"),
        token_distance=distance,
    )


def unfaithful_mrf_fixture() -> tuple[JointTable, tuple[ConditionalTable, ConditionalTable], float]:
    """The V=2 counterexample where compatible conditionals yield an
    unfaithful product-of-conditionals joint.

    The ground truth puts mass 97/100 on (0, 0) and 1/100 elsewhere, so both
    conditionals are (97/98, 1/98) given token 0 and (1/2, 1/2) given token 1.
    Feeding them through ``mrf_joint`` and re-deriving q(a | b=1) yields
    (0.02, 0.98) instead of (0.5, 0.5); the expected KL between those is
    log(1/196 + 1/4) - log(1/196)/2, about 1.27297 nats.
    """
    joint = np.array([[97.0, 1.0], [1.0, 1.0]]) / 100.0
    true_joint = JointTable(2, "truth", log_normalize(np.log(joint)))
    cond_a, cond_b = exact_conditionals(joint)
    table_a = ConditionalTable(2, "a", "b", np.log(cond_a))
    table_b = ConditionalTable(2, "b", "a", np.log(cond_b))
    expected_kl = math.log(1.0 / 196.0 + 1.0 / 4.0) - 0.5 * math.log(1.0 / 196.0)
    return true_joint, (table_a, table_b), expected_kl
