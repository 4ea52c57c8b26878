"""
Tests for hpa_moec.explore.
"""
import math
from unittest import TestCase

import numpy as np
import pytest

from hpa_moec.action import ACTION_DIM, N_OPTIONS, DiscreteOption
from hpa_moec.agent import STATE_DIM, AgentConfig, MoecAgent
from hpa_moec.exceptions import ConfigError
from hpa_moec.explore import (
    ExplorationSchedule,
    ExploreConfig,
    UncertaintyReport,
    act,
    candidate_set,
    compose_parameters,
    select_discrete,
    softmax_probabilities,
    uncertainty,
)


def small_agent(seed: int = 2, **overrides) -> MoecAgent:
    settings = dict(ensemble_size=3, hidden_dims=(8,), batch_size=4)
    settings.update(overrides)
    return MoecAgent(AgentConfig(**settings), seed=seed)


def sample_state(rng: np.random.Generator, lane: int = 1) -> np.ndarray:
    state = rng.normal(scale=0.5, size=STATE_DIM)
    state[0] = lane
    state[4] = rng.uniform(5.0, 15.0)
    return state


class SoftmaxTest(TestCase):
    """Test option sampling probabilities."""

    def test_hand_case(self):
        """Test variances (0, ln 3) give probabilities (0.25, 0.75)."""
        np.testing.assert_allclose(softmax_probabilities([0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-12)

    def test_symmetry(self):
        """Test equal variances give equal probabilities."""
        np.testing.assert_allclose(softmax_probabilities([0.7, 0.7]), [0.5, 0.5])

    def test_normalised_and_positive(self):
        """Test probabilities sum to one and stay positive for large inputs."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = softmax_probabilities(rng.uniform(0.0, 500.0, size=N_OPTIONS))
            self.assertAlmostEqual(p.sum(), 1.0, delta=1e-9)
            self.assertTrue(np.all(p > 0.0) or np.isclose(p.max(), 1.0))


class CandidateTest(TestCase):
    """Test candidate parameter vectors."""

    def test_one_dimensional_example(self):
        """Test mu 0, gradient 1 and two steps inside [-1, 1]."""
        candidates = candidate_set(np.array([0.0]), np.array([1.0]), np.array([-1.0]), np.array([1.0]), 2, 1.0)
        np.testing.assert_allclose(candidates[:, 0], [0.0, 0.5, 1.0])

    def test_zero_gradient(self):
        """Test a flat variance keeps every candidate at mu."""
        mu = np.array([20.0, 1.0, 30.0, -1.0, 40.0, 0.0])
        candidates = candidate_set(mu, np.zeros(6), np.full(6, -50.0), np.full(6, 50.0), 10, 1.0)
        self.assertEqual(candidates.shape, (11, 6))
        np.testing.assert_array_equal(candidates, np.tile(mu, (11, 1)))

    def test_saturation(self):
        """Test candidates saturate at the bounds."""
        candidates = candidate_set(np.array([0.9]), np.array([5.0]), np.array([-1.0]), np.array([1.0]), 4, 1.0)
        self.assertEqual(candidates.max(), 1.0)

    def test_count_checked(self):
        """Test a zero candidate count is rejected."""
        with self.assertRaises(ConfigError):
            candidate_set(np.zeros(1), np.zeros(1), -np.ones(1), np.ones(1), 0, 1.0)


class ComposeTest(TestCase):
    """Test per-option candidate selection."""

    def test_takes_each_option_from_its_best_candidate(self):
        """Test option blocks come from the highest-variance candidates."""
        candidates = np.array([[1, 1, 2, 2, 3, 3], [10, 10, 20, 20, 30, 30]], dtype=float)
        scores = np.array([[0.5, 0.1, 0.9], [0.2, 0.3, 0.9]])
        composed, chosen = compose_parameters(candidates, scores)
        np.testing.assert_array_equal(chosen, [0, 1, 0])
        np.testing.assert_array_equal(composed, [1, 1, 20, 20, 3, 3])


class UncertaintyTest(TestCase):
    """Test ensemble disagreement."""

    def test_non_negative(self):
        """Test every variance is non-negative."""
        agent = small_agent()
        rng = np.random.default_rng(1)
        for _ in range(200):
            state = sample_state(rng)
            report = uncertainty(agent, state, agent.actor_forward(state), with_gradient=False)
            self.assertTrue(np.all(report.per_objective >= 0.0))
            self.assertGreaterEqual(report.state, 0.0)

    def test_permutation_invariant(self):
        """Test reordering critics inside an ensemble keeps the variance."""
        agent = small_agent()
        state = sample_state(np.random.default_rng(3))
        params = agent.actor_forward(state)
        before = uncertainty(agent, state, params)
        agent.critics = [list(reversed(row)) for row in agent.critics]
        after = uncertainty(agent, state, params)
        self.assertAlmostEqual(before.state, after.state, places=12)
        np.testing.assert_allclose(before.gradient, after.gradient, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        """Test the variance gradient against central differences."""
        agent = small_agent()
        rng = np.random.default_rng(4)
        state = sample_state(rng)
        params = agent.actor_forward(state)
        report = uncertainty(agent, state, params)
        numeric = np.empty(ACTION_DIM)
        for k in range(ACTION_DIM):
            eps = 1e-6 * agent.config.space.scale[k]
            plus, minus = params.copy(), params.copy()
            plus[k] += eps
            minus[k] -= eps
            up = uncertainty(agent, state, plus, with_gradient=False).total.sum()
            down = uncertainty(agent, state, minus, with_gradient=False).total.sum()
            numeric[k] = (up - down) / (2 * eps)
        np.testing.assert_allclose(report.gradient, numeric, rtol=1e-4, atol=1e-10)

    def test_identical_critics_have_no_spread(self):
        """Test an ensemble of copies reports zero variance."""
        agent = small_agent(ensemble_size=2)
        agent.critics = [[row[0].copy() for _ in row] for row in agent.critics]
        state = sample_state(np.random.default_rng(5))
        report = uncertainty(agent, state, agent.actor_forward(state))
        self.assertEqual(report.state, 0.0)
        np.testing.assert_array_equal(report.gradient, np.zeros(ACTION_DIM))


class DiscreteSelectionTest(TestCase):
    """Test the softmax or greedy option choice."""

    def test_low_variance_is_greedy(self):
        """Test variance below the threshold acts greedily."""
        agent = small_agent()
        state = sample_state(np.random.default_rng(6))
        params = agent.actor_forward(state)
        report = UncertaintyReport(np.zeros((2, N_OPTIONS)), np.zeros(N_OPTIONS), 0.0)
        option, branch = select_discrete(
            agent, state, params, report, 1.0, ExploreConfig(), np.random.default_rng(0)
        )
        self.assertEqual(branch, "greedy")
        self.assertEqual(option, agent.greedy_option(state, params))

    def test_high_variance_samples(self):
        """Test variance above the threshold samples by softmax."""
        agent = small_agent()
        state = sample_state(np.random.default_rng(6))
        total = np.array([0.0, math.log(3.0), 0.0])
        report = UncertaintyReport(np.tile(total, (2, 1)), total, 1.0)
        rng = np.random.default_rng(0)
        counts = np.zeros(N_OPTIONS)
        for _ in range(2000):
            option, branch = select_discrete(
                agent, state, agent.actor_forward(state), report, 1.0, ExploreConfig(), rng
            )
            self.assertEqual(branch, "softmax")
            counts[option] += 1
        np.testing.assert_allclose(counts / counts.sum(), [0.2, 0.6, 0.2], atol=0.04)


class ScheduleTest(TestCase):
    """Test the exploration weight schedule."""

    def test_endpoints_and_floor(self):
        """Test the weight decays from start to the floor and stays there."""
        schedule = ExplorationSchedule(1.0, 0.001, 1000)
        self.assertEqual(schedule.value(0), 1.0)
        self.assertAlmostEqual(schedule.value(1000), 0.001)
        self.assertEqual(schedule.value(5000), 0.001)
        values = [schedule.value(step) for step in range(0, 1000, 50)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))

    def test_config_checks(self):
        """Test invalid exploration settings are rejected."""
        with self.assertRaises(ConfigError):
            ExploreConfig(candidates=0)
        with self.assertRaises(ConfigError):
            ExploreConfig(varsigma_start=0.01, varsigma_end=0.1)
        with self.assertRaises(ConfigError):
            ExploreConfig(source="boltzmann")


class ActTest(TestCase):
    """Test full action selection."""

    def test_zero_variance_reduces_to_greedy(self):
        """Test copies of one critic give the greedy option with the actor output."""
        agent = small_agent(ensemble_size=2)
        agent.critics = [[row[0].copy() for _ in row] for row in agent.critics]
        state = sample_state(np.random.default_rng(8))
        decision = act(agent, state, ExploreConfig(), 1.0, np.random.default_rng(0))
        greedy = act(agent, state, ExploreConfig(), 1.0, np.random.default_rng(0), mode="greedy")
        self.assertEqual(decision.branch, "greedy")
        np.testing.assert_allclose(decision.parameters, agent.actor_forward(state))
        self.assertEqual(decision.action, greedy.action)

    def test_parameters_inside_bounds(self):
        """Test explored parameters always respect the bounds."""
        agent = small_agent()
        rng = np.random.default_rng(9)
        for source in ("uncertainty", "random"):
            config = ExploreConfig(source=source, candidates=4)
            for _ in range(20):
                state = sample_state(rng)
                decision = act(agent, state, config, 1.0, rng)
                low, high = agent.bounds(state)
                self.assertTrue(np.all(decision.parameters >= low - 1e-12))
                self.assertTrue(np.all(decision.parameters <= high + 1e-12))

    def test_random_source_keeps_to_legal_options(self):
        """Test epsilon-greedy exploration never leaves the road."""
        agent = small_agent()
        rng = np.random.default_rng(10)
        config = ExploreConfig(source="random")
        for _ in range(100):
            decision = act(agent, sample_state(rng, lane=0), config, 1.0, rng)
            self.assertNotEqual(decision.action.option, DiscreteOption.RLC)

    def test_unknown_mode(self):
        """Test an unknown action mode is a configuration error."""
        agent = small_agent()
        with self.assertRaises(ConfigError):
            act(agent, np.zeros(STATE_DIM), ExploreConfig(), 1.0, np.random.default_rng(0), mode="sample")


@pytest.mark.slow
class UncertaintySweepTest(TestCase):
    """Test ensemble variances over many random state-parameter pairs."""

    def test_non_negative_over_ten_thousand_samples(self):
        """Test variances stay non-negative for random states and in-range parameters."""
        agent = small_agent(ensemble_size=6)
        rng = np.random.default_rng(7)
        for _ in range(10000):
            state = sample_state(rng, lane=int(rng.integers(0, 3)))
            low, high = agent.bounds(state)
            report = uncertainty(agent, state, rng.uniform(low, high), with_gradient=False)
            self.assertTrue(np.all(report.per_objective >= 0.0))
            self.assertTrue(np.all(report.total >= 0.0))
            self.assertGreaterEqual(report.state, 0.0)
