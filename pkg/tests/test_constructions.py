"""The five constructions against ground-truth and brute-force oracles."""

import math

import numpy as np
import pytest

from pairjoint import (
    AGConfig,
    AGTrace,
    InputError,
    JointTable,
    MarginalVector,
    NumericalError,
    ag_joint,
    ag_objective,
    derive_joint,
    gen_synthetic,
    hcb_joint,
    hcb_pivot,
    kl_divergence,
    mlm_joint,
    mrf_joint,
    row_conditionals,
    unfaithful_mrf_fixture,
)
from pairjoint.core import ConditionalTable

from conftest import oracle_conditionals, oracle_kl


def uniform_conditionals(v):
    table = np.log(np.full((v, v), 1.0 / v))
    return (ConditionalTable(v, "a", "b", table),
            ConditionalTable(v, "b", "a", table.copy()))


def product_conditionals(pa, pb):
    """Exact conditionals of the independent joint pa (x) pb."""
    v = len(pa)
    a_given_b = ConditionalTable(v, "a", "b", np.log(np.tile(pa, (v, 1))))
    b_given_a = ConditionalTable(v, "b", "a", np.log(np.tile(pb, (v, 1))))
    return a_given_b, b_given_a


class TestMlmJoint:
    def test_uniform_product(self):
        v = 4
        uniform = MarginalVector.from_probs(np.full(v, 1.0 / v), "a")
        joint = mlm_joint(uniform, MarginalVector.from_probs(np.full(v, 1.0 / v), "b"))
        np.testing.assert_allclose(np.exp(joint.log_joint), 1.0 / 16.0, atol=1e-15)

    def test_degenerate_marginal(self):
        v = 5
        delta = np.zeros(v)
        delta[3] = 1.0
        marg_a = MarginalVector.from_probs(delta, "a")
        pb = np.random.default_rng(1).dirichlet(np.ones(v))
        joint = mlm_joint(marg_a, MarginalVector.from_probs(pb, "b"))
        linear = np.exp(joint.log_joint)
        np.testing.assert_allclose(linear[3], pb, rtol=1e-9)
        assert linear[[0, 1, 2, 4]].max() < 1e-11  # everything else at the floor

    def test_independence_of_derived_conditionals(self):
        rng = np.random.default_rng(2)
        marg_a = MarginalVector.from_probs(rng.dirichlet(np.ones(7)), "a")
        marg_b = MarginalVector.from_probs(rng.dirichlet(np.ones(7)), "b")
        joint = mlm_joint(marg_a, marg_b)
        rows_b = np.exp(row_conditionals(joint, "b_given_a").log_probs)
        np.testing.assert_allclose(rows_b, np.tile(np.exp(marg_b.log_probs), (7, 1)), atol=1e-13)
        rows_a = np.exp(row_conditionals(joint, "a_given_b").log_probs)
        np.testing.assert_allclose(rows_a, np.tile(np.exp(marg_a.log_probs), (7, 1)), atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            mlm_joint(MarginalVector.from_probs(np.full(2, 0.5), "a"),
                      MarginalVector.from_probs(np.full(3, 1 / 3), "b"))


class TestMrfJoint:
    def test_recovers_independent_joint(self):
        rng = np.random.default_rng(3)
        pa, pb = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        joint = mrf_joint(*product_conditionals(pa, pb))
        np.testing.assert_allclose(np.exp(joint.log_joint), np.outer(pa, pb), atol=1e-12)

    def test_counterexample_values(self):
        _, conds, _ = unfaithful_mrf_fixture()
        joint = mrf_joint(*conds)
        expected = np.array([[9409.0, 49.0], [49.0, 2401.0]]) / 11908.0
        np.testing.assert_allclose(np.exp(joint.log_joint), expected, rtol=0, atol=1e-12)
        assert joint.method == "mrf"

    def test_uniform(self):
        joint = mrf_joint(*uniform_conditionals(3))
        np.testing.assert_allclose(np.exp(joint.log_joint), 1.0 / 9.0, atol=1e-15)

    def test_logits_channel_required(self):
        with pytest.raises(InputError, match="logits"):
            mrf_joint(*uniform_conditionals(3), channel="logits")

    def test_logits_equal_to_log_probs_coincide(self):
        inst = gen_synthetic(5, seed=10, perturb_scale=0.3)
        with_logits = (
            ConditionalTable(5, "a", "b", inst.cond_a_given_b.log_probs,
                             logits=inst.cond_a_given_b.log_probs),
            ConditionalTable(5, "b", "a", inst.cond_b_given_a.log_probs,
                             logits=inst.cond_b_given_a.log_probs),
        )
        probs = mrf_joint(*with_logits, channel="probs")
        logits = mrf_joint(*with_logits, channel="logits")
        assert logits.method == "mrf_logit"
        np.testing.assert_allclose(logits.log_joint, probs.log_joint, atol=1e-9)

    def test_shifted_logits_differ(self):
        inst = gen_synthetic(5, seed=11)
        shift_a = np.linspace(-1, 1, 5)[:, None]
        shift_b = np.linspace(1, -1, 5)[:, None]
        tables = (
            ConditionalTable(5, "a", "b", inst.cond_a_given_b.log_probs,
                             logits=inst.cond_a_given_b.log_probs + shift_a),
            ConditionalTable(5, "b", "a", inst.cond_b_given_a.log_probs,
                             logits=inst.cond_b_given_a.log_probs + shift_b),
        )
        probs = mrf_joint(*tables, channel="probs")
        logits = mrf_joint(*tables, channel="logits")
        assert np.abs(logits.log_joint - probs.log_joint).max() > 1e-3


class TestHcbPivot:
    def test_peaked_marginals(self):
        v = 12
        pa = np.full(v, 1e-3)
        pa[5] = 1 - 1e-3 * (v - 1)
        pb = np.full(v, 1e-3)
        pb[9] = 1 - 1e-3 * (v - 1)
        joint = mlm_joint(MarginalVector.from_probs(pa, "a"), MarginalVector.from_probs(pb, "b"))
        assert hcb_pivot(joint) == (5, 9)

    def test_uniform_tie_breaks_lexicographic(self):
        v = 4
        joint = mlm_joint(MarginalVector.from_probs(np.full(v, 0.25), "a"),
                          MarginalVector.from_probs(np.full(v, 0.25), "b"))
        assert hcb_pivot(joint) == (0, 0)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            marg_a = MarginalVector.from_probs(rng.dirichlet(np.ones(6)), "a")
            marg_b = MarginalVector.from_probs(rng.dirichlet(np.ones(6)), "b")
            joint = mlm_joint(marg_a, marg_b)
            best, best_val = None, -np.inf
            for i in range(6):
                for j in range(6):
                    if joint.log_joint[i, j] > best_val:
                        best, best_val = (i, j), joint.log_joint[i, j]
            assert hcb_pivot(joint) == best

    def test_requires_mlm_tag(self):
        _, conds, _ = unfaithful_mrf_fixture()
        with pytest.raises(InputError):
            hcb_pivot(mrf_joint(*conds))


class TestHcbJoint:
    def test_recovers_truth_for_any_pivot(self):
        for seed in range(5):
            inst = gen_synthetic(6, seed=seed)
            truth = np.exp(inst.true_joint.log_joint)
            for pivot in ((0, 0), (3, 5), (5, 1)):
                joint = hcb_joint(inst.cond_a_given_b, inst.cond_b_given_a, pivot)
                assert np.abs(np.exp(joint.log_joint) - truth).max() < 1e-9
                assert joint.pivot == pivot

    def test_product_joint_recovery(self):
        rng = np.random.default_rng(23)
        pa, pb = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
        joint = hcb_joint(*product_conditionals(pa, pb), pivot=(2, 1))
        np.testing.assert_allclose(np.exp(joint.log_joint), np.outer(pa, pb), atol=1e-12)

    def test_pivot_invariance_on_compatible(self):
        inst = gen_synthetic(5, seed=77)
        a = hcb_joint(inst.cond_a_given_b, inst.cond_b_given_a, (0, 0))
        b = hcb_joint(inst.cond_a_given_b, inst.cond_b_given_a, (4, 2))
        np.testing.assert_allclose(a.log_joint, b.log_joint, atol=1e-9)

    def test_pivot_variance_surfaced_on_incompatible(self):
        inst = gen_synthetic(5, seed=78, perturb_scale=1.0)
        a = hcb_joint(inst.cond_a_given_b, inst.cond_b_given_a, (0, 0))
        b = hcb_joint(inst.cond_a_given_b, inst.cond_b_given_a, (4, 2))
        assert np.abs(a.log_joint - b.log_joint).max() > 1e-6

    def test_pivot_out_of_range(self):
        inst = gen_synthetic(3, seed=1)
        with pytest.raises(InputError):
            hcb_joint(inst.cond_a_given_b, inst.cond_b_given_a, (3, 0))


class TestAgJoint:
    def test_recovers_truth_on_compatible(self):
        # converging sizes; the tiny-V slow tail is covered in acceptance
        for seed, v in ((0, 6), (1, 8), (2, 10), (3, 7), (4, 9)):
            inst = gen_synthetic(v, seed=seed)
            joint, trace = ag_joint(inst.cond_a_given_b, inst.cond_b_given_a)
            kl = float(kl_divergence(inst.true_joint.log_joint.ravel(),
                                     joint.log_joint.ravel()))
            assert kl < 1e-6
            assert trace.iterations_run <= 50
            assert joint.iterations == trace.iterations_run

    def test_uniform_fixed_point(self):
        joint, trace = ag_joint(*uniform_conditionals(4))
        np.testing.assert_allclose(np.exp(joint.log_joint), 1.0 / 16.0, atol=1e-14)
        assert trace.iterations_run == 1
        assert trace.converged

    def test_objective_non_increasing_on_perturbed(self):
        inst = gen_synthetic(2, seed=5, perturb_scale=0.7)
        joint, trace = ag_joint(inst.cond_a_given_b, inst.cond_b_given_a,
                                AGConfig(max_iterations=50, convergence_tol=0.0,
                                         track_objective=True))
        vals = np.array(trace.objective_values)
        assert len(vals) == 51  # uniform init plus one value per update
        assert np.diff(vals).max() <= 1e-9
        assert vals[-1] <= vals[0]
        assert not trace.converged

    def test_convergence_tol_zero_runs_to_cap(self):
        inst = gen_synthetic(4, seed=9)
        _, trace = ag_joint(inst.cond_a_given_b, inst.cond_b_given_a,
                            AGConfig(max_iterations=7, convergence_tol=0.0))
        assert trace.iterations_run == 7
        assert not trace.converged

    def test_config_validation(self):
        with pytest.raises(InputError):
            AGConfig(max_iterations=0)
        with pytest.raises(InputError):
            AGConfig(convergence_tol=-1e-3)

    def test_trace_rejects_increasing_objective(self):
        with pytest.raises(NumericalError):
            AGTrace(iterations_run=2, converged=False, objective_values=(1.0, 2.0))


class TestAgObjective:
    def test_zero_when_candidate_matches(self):
        inst = gen_synthetic(6, seed=3)
        assert ag_objective(inst.cond_a_given_b, inst.cond_b_given_a, inst.true_joint) < 1e-20

    def test_zero_on_uniform(self):
        v = 3
        uniform_joint = JointTable(v, "truth", np.full((v, v), -math.log(v * v)))
        assert ag_objective(*uniform_conditionals(v), candidate=uniform_joint) < 1e-20

    def test_matches_double_loop_oracle(self):
        inst = gen_synthetic(3, seed=21, perturb_scale=0.5)
        candidate = gen_synthetic(3, seed=22).true_joint
        got = ag_objective(inst.cond_a_given_b, inst.cond_b_given_a, candidate)
        der_a, der_b = oracle_conditionals(np.exp(candidate.log_joint).tolist())
        cond_a = np.exp(inst.cond_a_given_b.log_probs).tolist()
        cond_b = np.exp(inst.cond_b_given_a.log_probs).tolist()
        expected = sum(oracle_kl(cond_a[j], der_a[j]) for j in range(3))
        expected += sum(oracle_kl(cond_b[i], der_b[i]) for i in range(3))
        assert abs(got - expected) < 1e-12


class TestAllConstructionsNormalized:
    def test_normalized_on_mixed_inputs(self, small_record):
        for method in ("mlm", "mrf", "mrf_logit", "hcb", "ag"):
            joint = derive_joint(small_record.cond_a_given_b, small_record.cond_b_given_a,
                                 small_record.marg_a, small_record.marg_b, method)
            assert abs(np.exp(joint.log_joint).sum() - 1.0) < 1e-9
            assert joint.method == method

    def test_product_inputs_fix_all_constructions(self):
        rng = np.random.default_rng(31)
        pa, pb = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        cond_a, cond_b = product_conditionals(pa, pb)
        marg_a = MarginalVector.from_probs(pa, "a")
        marg_b = MarginalVector.from_probs(pb, "b")
        expected = np.outer(pa, pb)
        # AG gets a run-to-convergence budget: the invariant is about the
        # construction's fixed point, not the 50-step default
        deep = AGConfig(max_iterations=20000, convergence_tol=1e-15)
        for method in ("mlm", "mrf", "hcb", "ag"):
            joint = derive_joint(cond_a, cond_b, marg_a, marg_b, method, ag_config=deep)
            np.testing.assert_allclose(np.exp(joint.log_joint), expected, atol=1e-9)

    def test_unknown_method(self, small_record):
        with pytest.raises(InputError):
            derive_joint(small_record.cond_a_given_b, small_record.cond_b_given_a,
                         small_record.marg_a, small_record.marg_b, "gibbs")
