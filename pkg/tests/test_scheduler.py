"""Unit tests for the sampling-weight policies and the simplex update."""

import math

import numpy as np
import pytest

from moemix.errors import ConfigurationError
from moemix.scheduler import (
    LossGap,
    RoundSignals,
    SamplingWeights,
    SchedulerConfig,
    ScriptedPolicy,
    as_simplex,
    datasize_weights,
    dynamic_update,
    inverse_update,
    make_policy,
    random_weights,
    refloss_update,
    sequential_weights,
    uniform_weights,
)

UNIFORM4 = SamplingWeights(np.full(4, 0.25))


def test_sampling_weights_validation():
    with pytest.raises(ConfigurationError):
        SamplingWeights(np.array([0.5, 0.2]))
    with pytest.raises(ConfigurationError):
        SamplingWeights(np.array([0.7, -0.1, 0.4]))
    w = SamplingWeights(np.array([0.5, 0.5]))
    assert w.round_index == 0 and w.num_datasets == 2


class TestDynamicUpdate:
    def test_equal_distances_leave_uniform_unchanged(self):
        for d in (0.0, 1.0, -3.5):
            out = dynamic_update(UNIFORM4, np.full(4, d), eta=2.0, smoothing=0.0)
            np.testing.assert_allclose(out.w, 0.25, atol=1e-15)

    def test_hand_evaluated_softmax(self):
        # softmax(log 1/4 + [1,0,0,0]) = [e, 1, 1, 1] / (e + 3); the spec's
        # approximate figures (0.47537, 0.17488) match to 5 decimals.
        out = dynamic_update(UNIFORM4, np.array([1.0, 0, 0, 0]), eta=1.0, smoothing=0.0)
        e = math.exp(1.0)
        expected = np.array([e, 1.0, 1.0, 1.0]) / (e + 3.0)
        np.testing.assert_allclose(out.w, expected, atol=1e-12)
        assert out.round_index == 1

    def test_uniform_is_fixed_point_of_smoothing(self):
        out = dynamic_update(UNIFORM4, np.full(4, 2.0), eta=1.0, smoothing=0.05)
        np.testing.assert_allclose(out.w, 0.25, atol=1e-15)

    def test_paper_default_hyperparameters_accepted(self):
        out = dynamic_update(UNIFORM4, np.array([0.1, 0.2, 0.3, 0.4]), eta=10.0, smoothing=0.05)
        assert abs(out.w.sum() - 1.0) < 1e-12

    def test_zero_weight_entry_faults(self):
        bad = SamplingWeights(np.array([1.0, 0.0]))
        with pytest.raises(ConfigurationError, match="positive"):
            dynamic_update(bad, np.array([0.1, 0.2]), eta=1.0, smoothing=0.0)

    def test_bad_hyperparameters_fault(self):
        with pytest.raises(ConfigurationError):
            dynamic_update(UNIFORM4, np.zeros(4), eta=0.0, smoothing=0.0)
        with pytest.raises(ConfigurationError):
            dynamic_update(UNIFORM4, np.zeros(4), eta=1.0, smoothing=1.0)
        with pytest.raises(ConfigurationError):
            dynamic_update(UNIFORM4, np.zeros(3), eta=1.0, smoothing=0.0)


class TestRefLossUpdate:
    def test_equal_gaps_leave_weights_unchanged(self):
        gaps = LossGap(np.array([2.0, 2.0, 2.0, 2.0]), np.array([1.5, 1.5, 1.5, 1.5]))
        out = refloss_update(UNIFORM4, gaps, eta=1.0, smoothing=0.0)
        np.testing.assert_allclose(out.w, 0.25, atol=1e-15)

    def test_hand_evaluated_gap_softmax(self):
        # Exact oracle: softmax over exp(gaps) from a uniform prior gives
        # [a, 1, 1, 1]/(a+3) with a = e^0.5 = 1.64872...; the spec's rounded
        # figures (0.35477, 0.21508) agree with this only to ~2e-4.
        gaps = LossGap(np.array([0.5, 0.0, 0.0, 0.0]), np.zeros(4))
        out = refloss_update(UNIFORM4, gaps, eta=1.0, smoothing=0.0)
        a = math.exp(0.5)
        expected = np.array([a, 1.0, 1.0, 1.0]) / (a + 3.0)
        np.testing.assert_allclose(out.w, expected, atol=1e-12)

    def test_negative_gap_lowers_relative_weight(self):
        gaps = LossGap(np.array([1.0, 1.5, 1.5, 1.5]), np.full(4, 1.5))
        out = refloss_update(UNIFORM4, gaps, eta=1.0, smoothing=0.0)
        assert out.w[0] < 0.25
        assert np.all(out.w[1:] > 0.25)


class TestInverseUpdate:
    def test_hand_evaluated_negated_softmax(self):
        out = inverse_update(UNIFORM4, np.array([1.0, 0, 0, 0]), eta=1.0, smoothing=0.0)
        b = math.exp(-1.0)
        expected = np.array([b, 1.0, 1.0, 1.0]) / (b + 3.0)
        np.testing.assert_allclose(out.w, expected, atol=1e-12)

    def test_equal_distances_unchanged(self):
        out = inverse_update(UNIFORM4, np.full(4, 0.7), eta=3.0, smoothing=0.0)
        np.testing.assert_allclose(out.w, 0.25, atol=1e-15)

    def test_exact_duality_with_dynamic(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = SamplingWeights(rng.dirichlet(np.ones(5)) * 0.98 + 0.004)
            delta = rng.normal(size=5)
            a = inverse_update(w, delta, eta=2.0, smoothing=0.1)
            b = dynamic_update(w, -delta, eta=2.0, smoothing=0.1)
            np.testing.assert_array_equal(a.w, b.w)

    def test_ordering_reversed_vs_dynamic(self):
        rng = np.random.default_rng(1)
        w = SamplingWeights(rng.dirichlet(np.ones(4)) * 0.9 + 0.025)
        delta = np.array([0.4, 0.1, 0.9, 0.2])
        dyn = dynamic_update(w, delta, eta=1.0, smoothing=0.0)
        inv = inverse_update(w, delta, eta=1.0, smoothing=0.0)
        ratio_dyn = dyn.w / w.w
        ratio_inv = inv.w / w.w
        assert list(np.argsort(ratio_dyn)) == list(np.argsort(ratio_inv)[::-1])


class TestStaticPolicies:
    def test_datasize_equal_sizes_is_uniform(self):
        np.testing.assert_allclose(datasize_weights([20000] * 4).w, 0.25)

    def test_datasize_proportional(self):
        np.testing.assert_allclose(datasize_weights([10, 30]).w, [0.25, 0.75])

    def test_datasize_rejects_nonpositive(self):
        with pytest.raises(ConfigurationError):
            datasize_weights([5, 0])

    def test_final_static_accepts_published_endpoint(self):
        # Final weights reported for the 4-expert model, held constant.
        cfg = SchedulerConfig(policy="final_static",
                              final_weights=(0.2841, 0.2351, 0.2345, 0.2463))
        policy = make_policy(cfg, 4)
        w0 = policy.initial()
        w1, delta = policy.update(w0, RoundSignals())
        np.testing.assert_allclose(w0.w, [0.2841, 0.2351, 0.2345, 0.2463], atol=1e-12)
        np.testing.assert_array_equal(w0.w, w1.w)
        np.testing.assert_array_equal(delta, np.zeros(4))

    def test_final_static_rejects_non_simplex(self):
        cfg = SchedulerConfig(policy="final_static", final_weights=(0.5, 0.2, 0.1, 0.1))
        with pytest.raises(ConfigurationError):
            make_policy(cfg, 4)

    def test_uniform_policy_constant(self):
        policy = make_policy(SchedulerConfig(policy="uniform"), 4)
        w = policy.initial()
        for _ in range(3):
            w, _ = policy.update(w, RoundSignals())
            np.testing.assert_allclose(w.w, 0.25)


class TestRandomPolicy:
    def test_zero_noise_is_uniform_every_round(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            w = random_weights(4, rng, noise_scale=0.0)
            np.testing.assert_allclose(w.w, 0.25)

    def test_simplex_over_many_rounds(self):
        rng = np.random.default_rng(4)
        for _ in range(2000):
            w = random_weights(5, rng)
            assert np.all(w.w >= 0)
            assert abs(w.w.sum() - 1.0) < 1e-12

    def test_fixed_seed_reproducible(self):
        cfg = SchedulerConfig(policy="random", seed=11)
        a = make_policy(cfg, 4)
        b = make_policy(cfg, 4)
        wa, wb = a.initial(), b.initial()
        for _ in range(5):
            np.testing.assert_array_equal(wa.w, wb.w)
            wa, _ = a.update(wa, RoundSignals())
            wb, _ = b.update(wb, RoundSignals())


class TestSequentialPolicy:
    def test_first_round_first_dataset(self):
        np.testing.assert_array_equal(sequential_weights(0, 4).w, [1, 0, 0, 0])

    def test_modular_cycling(self):
        np.testing.assert_array_equal(sequential_weights(5, 4).w, [0, 1, 0, 0])

    def test_full_cycle_sums_to_ones(self):
        total = sum(sequential_weights(t, 4).w for t in range(8, 12))
        np.testing.assert_array_equal(total, np.ones(4))


class TestPolicyWiring:
    def test_dynamic_policy_consumes_gate_distances(self):
        policy = make_policy(SchedulerConfig(policy="dynamic", eta=1.0, smoothing=0.0), 4)
        w = policy.initial()
        np.testing.assert_allclose(w.w, 0.25)
        out, delta = policy.update(w, RoundSignals(gate_distances=np.array([1.0, 0, 0, 0])))
        e = math.exp(1.0)
        np.testing.assert_allclose(out.w, np.array([e, 1, 1, 1]) / (e + 3), atol=1e-12)
        np.testing.assert_array_equal(delta, [1.0, 0, 0, 0])

    def test_dynamic_policy_missing_signal_faults(self):
        policy = make_policy(SchedulerConfig(policy="dynamic"), 4)
        with pytest.raises(ConfigurationError):
            policy.update(policy.initial(), RoundSignals())

    def test_refloss_missing_references_instructs_two_phase(self):
        policy = make_policy(SchedulerConfig(policy="refloss"), 4)
        with pytest.raises(ConfigurationError, match="uniform"):
            policy.update(
                policy.initial(), RoundSignals(current_losses=np.ones(4))
            )

    def test_two_dataset_warning(self):
        with pytest.warns(UserWarning, match="two datasets"):
            make_policy(SchedulerConfig(policy="dynamic"), 2)

    def test_static_distances_freezes_first_signal(self):
        cfg = SchedulerConfig(policy="dynamic", eta=1.0, smoothing=0.0, static_distances=True)
        policy = make_policy(cfg, 4)
        w = policy.initial()
        first = np.array([0.5, 0.0, 0.0, 0.0])
        w, d1 = policy.update(w, RoundSignals(gate_distances=first))
        w, d2 = policy.update(w, RoundSignals(gate_distances=np.array([0.0, 9.0, 0.0, 0.0])))
        np.testing.assert_array_equal(d1, first)
        np.testing.assert_array_equal(d2, first)

    def test_custom_initial_weights(self):
        cfg = SchedulerConfig(policy="dynamic", initial_weights=(0.4, 0.3, 0.2, 0.1))
        policy = make_policy(cfg, 4)
        np.testing.assert_allclose(policy.initial().w, [0.4, 0.3, 0.2, 0.1])

    def test_scripted_policy_replays_and_exhausts(self):
        traj = [np.full(3, 1 / 3), np.array([0.5, 0.25, 0.25])]
        policy = ScriptedPolicy(traj)
        w = policy.initial()
        np.testing.assert_allclose(w.w, 1 / 3)
        w, _ = policy.update(w, RoundSignals())
        np.testing.assert_allclose(w.w, [0.5, 0.25, 0.25])
        with pytest.raises(ConfigurationError):
            policy.update(w, RoundSignals())

    def test_unknown_policy_rejected(self):
        with pytest.raises(ConfigurationError):
            SchedulerConfig(policy="doremi")


class TestSimplexProperties:
    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = rng.integers(2, 8)
            w = SamplingWeights(rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n)
            delta = rng.uniform(0, 2, size=n)
            shift = rng.uniform(-4, 4)
            a = dynamic_update(w, delta, eta=3.0, smoothing=0.02)
            b = dynamic_update(w, delta + shift, eta=3.0, smoothing=0.02)
            np.testing.assert_allclose(a.w, b.w, atol=1e-12)

    def test_smoothing_floor(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            c = float(rng.uniform(0.01, 0.5))
            w = SamplingWeights(rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n)
            out = dynamic_update(w, rng.uniform(0, 3, size=n), eta=5.0, smoothing=c)
            assert np.all(out.w >= c / n - 1e-12)

    def test_ratio_monotonicity_pre_smoothing(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(3, 8))
            w = SamplingWeights(rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n)
            delta = rng.normal(size=n)
            out = dynamic_update(w, delta, eta=2.0, smoothing=0.0)
            ratios = out.w / w.w
            order = np.argsort(delta)
            assert np.all(np.diff(ratios[order]) > -1e-12)

    def test_fixed_point_contraction_under_equal_distances(self):
        w = SamplingWeights(np.array([0.7, 0.1, 0.1, 0.1]))
        c = 0.2
        dist = np.abs(w.w - 0.25).max()
        for _ in range(10):
            w = dynamic_update(w, np.full(4, 1.3), eta=2.0, smoothing=c)
            new_dist = np.abs(w.w - 0.25).max()
            np.testing.assert_allclose(new_dist, (1 - c) * dist, rtol=1e-9)
            dist = new_dist


def test_as_simplex_renormalizes_drift():
    w = as_simplex([0.25 + 1e-9, 0.25, 0.25, 0.25])
    assert abs(w.sum() - 1.0) < 1e-15
