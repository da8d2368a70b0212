"""Shared fixtures and independent brute-force oracles.

The oracle functions here deliberately avoid pairjoint's vectorized code
paths: plain Python loops over linear probabilities, so they can serve as an
independent second route for every metric and construction they check.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import pytest

from pairjoint import gen_synthetic, synthetic_record


@contextmanager
def criterion(name: str):
    """Print one [PASS]/[FAIL] line per acceptance criterion."""
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    else:
        print(f"[PASS] {name}")


def oracle_normalize(scores):
    """Direct summation normalizer over a nested list of log scores."""
    flat = [x for row in scores for x in row]
    m = max(flat)
    z = m + math.log(sum(math.exp(x - m) for x in flat))
    return [[x - z for x in row] for row in scores]


def oracle_conditionals(joint):
    """Entrywise-division conditionals of a linear V x V joint.

    Returns (a_given_b, b_given_a), both as [context][target] nested lists.
    """
    v = len(joint)
    pa = [sum(joint[i][j] for j in range(v)) for i in range(v)]
    pb = [sum(joint[i][j] for i in range(v)) for j in range(v)]
    a_given_b = [[joint[i][j] / pb[j] for i in range(v)] for j in range(v)]
    b_given_a = [[joint[i][j] / pa[i] for j in range(v)] for i in range(v)]
    return a_given_b, b_given_a


def oracle_kl(p, q):
    """KL between two linear probability vectors, skipping tiny p terms."""
    total = 0.0
    for pi, qi in zip(p, q):
        if pi >= 1e-300:
            total += pi * (math.log(pi) - math.log(max(qi, 1e-300)))
    return total


def oracle_scores(record, joint_linear, use_original_unaries=False):
    """Brute-force recomputation of all four per-example metric terms.

    Double loop over contexts; conditionals by entrywise division.
    """
    v = record.vocab_size
    ga, gb = record.gold_a, record.gold_b
    cond_a = np.exp(record.cond_a_given_b.log_probs).tolist()
    cond_b = np.exp(record.cond_b_given_a.log_probs).tolist()
    der_a, der_b = oracle_conditionals(joint_linear)

    log_pair = math.log(joint_linear[ga][gb])
    if use_original_unaries:
        unary_a = math.log(cond_a[gb][ga])
        unary_b = math.log(cond_b[ga][gb])
    else:
        unary_a = math.log(der_a[gb][ga])
        unary_b = math.log(der_b[ga][gb])

    akl = 0.0
    for ctx in range(v):
        akl += oracle_kl(cond_a[ctx], der_a[ctx])
        akl += oracle_kl(cond_b[ctx], der_b[ctx])
    akl /= 2.0 * v
    gkl = (oracle_kl(cond_a[gb], der_a[gb]) + oracle_kl(cond_b[ga], der_b[ga])) / 2.0
    return log_pair, unary_a, unary_b, akl, gkl


def oracle_aggregate(per_example):
    """Spreadsheet-style recomputation of the dataset metrics.

    ``per_example`` holds (log_pair, unary_a, unary_b, akl, gkl) tuples.
    """
    n = len(per_example)
    pair_sum = sum(row[0] for row in per_example)
    unary_sum = sum(row[1] + row[2] for row in per_example)
    return {
        "p_ppl": math.exp(-pair_sum / (2 * n)),
        "u_ppl": math.exp(-unary_sum / (2 * n)),
        "a_kl": sum(row[3] for row in per_example) / n,
        "g_kl": sum(row[4] for row in per_example) / n,
    }


@pytest.fixture
def small_instance():
    return gen_synthetic(5, seed=42)


@pytest.fixture
def small_record(small_instance):
    return synthetic_record(small_instance, "fixture-00000")


def make_records(count, vocab_sizes, base_seed, concentration=1.0, perturb=0.0,
                 with_logits=True):
    """Deterministic batch of synthetic records cycling over vocab sizes."""
    records = []
    for i in range(count):
        v = vocab_sizes[i % len(vocab_sizes)]
        inst = gen_synthetic(v, seed=base_seed + i, concentration=concentration,
                             perturb_scale=perturb)
        records.append(synthetic_record(inst, f"rec-{base_seed}-{i:05d}", with_logits))
    return records
