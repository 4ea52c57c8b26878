"""
Tests for hpa_moec.trainer.
"""
import math
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from hpa_moec.action import ACTION_DIM
from hpa_moec.agent import STATE_DIM, AgentConfig, MoecAgent, Transition
from hpa_moec.env import EnvConfig, RoadSpec
from hpa_moec.exceptions import CheckpointError, ConfigError
from hpa_moec.explore import ExploreConfig
from hpa_moec.trainer import (
    ABLATION_COLUMNS,
    Experiment,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    ablation_mode,
    evaluate,
    learning_summary,
    run_ablation,
    steps_to_threshold,
    train,
)


def tiny_experiment(mode: str = "full", **train_overrides) -> Experiment:
    settings = dict(
        total_steps=40,
        warmup=8,
        buffer_size=50,
        checkpoint_every=0,
        eval_episodes=2,
        window=10,
        seeds=(0,),
        mode=mode,
    )
    settings.update(train_overrides)
    experiment = Experiment(
        env=EnvConfig(episode_seconds=2.0, density=0.1),
        agent=AgentConfig(ensemble_size=2, hidden_dims=(8,), batch_size=4),
        explore=ExploreConfig(candidates=3),
        train=TrainConfig(**settings),
    )
    return experiment.with_mode()


def transition(marker: float) -> Transition:
    return Transition(
        np.full(STATE_DIM, marker), np.zeros(ACTION_DIM), 1, np.array([marker, 0.0]), np.zeros(STATE_DIM), False
    )


class ReplayBufferTest(TestCase):
    """Test the FIFO replay buffer."""

    def test_eviction(self):
        """Test the oldest transitions leave first."""
        buffer = ReplayBuffer(3, objectives=2)
        for marker in range(5):
            buffer.add(transition(float(marker)))
        self.assertEqual(len(buffer), 3)
        self.assertEqual(sorted(buffer.states[:, 0]), [2.0, 3.0, 4.0])

    def test_sample_without_replacement(self):
        """Test one batch never repeats a transition."""
        buffer = ReplayBuffer(10, objectives=2)
        for marker in range(10):
            buffer.add(transition(float(marker)))
        batch = buffer.sample(10, np.random.default_rng(0))
        self.assertEqual(sorted(batch.states[:, 0]), list(range(10)))
        np.testing.assert_array_equal(batch.rewards[:, 0], batch.states[:, 0])

    def test_sample_too_large(self):
        """Test sampling more than stored is refused."""
        buffer = ReplayBuffer(10, objectives=2)
        buffer.add(transition(1.0))
        with self.assertRaises(ConfigError):
            buffer.sample(2, np.random.default_rng(0))


class TrainConfigTest(TestCase):
    """Test training settings."""

    def test_default_warmup(self):
        """Test warmup 0 means four batches."""
        self.assertEqual(TrainConfig(warmup=0).resolved_warmup(256), 1024)

    def test_warmup_limits(self):
        """Test warmup must cover a batch and fit in the buffer."""
        with self.assertRaises(ConfigError):
            TrainConfig(warmup=10).resolved_warmup(64)
        with self.assertRaises(ConfigError):
            TrainConfig(warmup=100, buffer_size=50).resolved_warmup(64)

    def test_unknown_mode(self):
        """Test an unknown mode is a configuration error."""
        with self.assertRaises(ConfigError):
            TrainConfig(mode="dqn")
        with self.assertRaises(ConfigError):
            ablation_mode("dqn")


class AblationModeTest(TestCase):
    """Test what each ablation mode changes."""

    def test_full_and_hpa_mo_differ_in_critics_and_exploration(self):
        """Test hpa_mo only changes M and the exploration source."""
        base = Experiment()
        full, hpa_mo = base.with_mode("full"), base.with_mode("hpa_mo")
        self.assertEqual(replace(hpa_mo.agent, ensemble_size=6), full.agent)
        self.assertEqual(hpa_mo.agent.ensemble_size, 1)
        self.assertEqual((full.explore.source, hpa_mo.explore.source), ("uncertainty", "random"))
        self.assertEqual(full.controller, hpa_mo.controller)
        self.assertEqual(full.env, hpa_mo.env)

    def test_hpa_has_one_objective(self):
        """Test hpa learns r_all alone."""
        hpa = Experiment().with_mode("hpa")
        self.assertEqual(hpa.agent.objectives, 1)
        self.assertEqual(hpa.agent.weights, (1.0,))
        self.assertEqual(hpa.reward.weights, (0.4, 0.6))

    def test_da_mo_is_discrete(self):
        """Test da_mo fixes the continuous parameters and steers with PD."""
        da_mo = Experiment().with_mode("da_mo")
        self.assertTrue(da_mo.agent.discrete_only)
        self.assertEqual(da_mo.controller.lateral, "pid")
        self.assertEqual(da_mo.train.mode, "da_mo")

    def test_da_mo_never_builds_paths(self):
        """Test da_mo training never builds a guiding path."""
        with tempfile.TemporaryDirectory() as tmp, patch("hpa_moec.action.build_path") as build_path:
            train(tiny_experiment("da_mo", total_steps=25), 0, tmp)
        build_path.assert_not_called()


class TrainTest(TestCase):
    """Test the training loop."""

    def test_zero_steps(self):
        """Test T = 0 writes the untouched initial agent."""
        experiment = tiny_experiment(total_steps=0)
        with tempfile.TemporaryDirectory() as tmp:
            initial = Trainer(experiment, 3, Path(tmp) / "fresh").agent
            result = train(experiment, 3, Path(tmp) / "run")
            loaded = MoecAgent.load(result.checkpoint)
        self.assertEqual(result.steps, 0)
        self.assertEqual(loaded.training_step, 0)
        self.assertTrue(result.log.empty)
        np.testing.assert_array_equal(loaded.actor.vector, initial.actor.vector)
        np.testing.assert_array_equal(loaded.critics[1][1].vector, initial.critics[1][1].vector)

    def test_no_updates_before_warmup(self):
        """Test the buffer fills without gradient steps before warmup."""
        with tempfile.TemporaryDirectory() as tmp:
            trainer = Trainer(tiny_experiment(total_steps=7), 0, tmp)
            trainer.run()
        self.assertEqual(len(trainer.buffer), 7)
        self.assertEqual(trainer.agent.training_step, 0)

    def test_smoke_run(self):
        """Test a short run logs finite losses and a non-increasing exploration weight."""
        with tempfile.TemporaryDirectory() as tmp:
            result = train(tiny_experiment(), 0, tmp)
            files = sorted(p.name for p in Path(tmp).iterdir())
            manifest = (result.checkpoint / "agent.manifest").read_text()
        self.assertEqual(files, ["checkpoint", "rewards.csv", "train.csv", "uncertainty.csv"])
        self.assertIn("mode=full", manifest)
        self.assertIn("training_step=33", manifest)
        self.assertEqual(len(result.rewards), 40)
        self.assertGreaterEqual(result.episodes, 1)
        losses = result.log["loss_critic_mean"].dropna()
        self.assertTrue(np.all(np.isfinite(losses)))
        self.assertTrue(np.all(np.diff(result.log["varsigma"]) <= 0))
        self.assertTrue(np.all(result.log["cr_running"].between(0, 100)))

    def test_log_has_one_row_per_episode(self):
        """Test train.csv rows are finished episodes whose totals match the per-step trace."""
        with tempfile.TemporaryDirectory() as tmp:
            result = train(tiny_experiment(), 0, tmp)
        log, rewards = result.log, result.rewards
        self.assertEqual(len(log), result.episodes)
        np.testing.assert_array_equal(log["episode"], np.arange(result.episodes))
        self.assertTrue(np.all(np.diff(log["step"]) > 0))
        start = 0
        for end, total in zip(log["step"], log["total_reward"]):
            in_episode = rewards["step"].between(start, end - 1)
            self.assertAlmostEqual(rewards.loc[in_episode, "r_all"].sum(), total, places=9)
            start = end

    def test_periodic_checkpoints(self):
        """Test checkpoints every N steps."""
        with tempfile.TemporaryDirectory() as tmp:
            train(tiny_experiment(total_steps=20, checkpoint_every=10), 0, tmp)
            names = sorted(p.name for p in (Path(tmp) / "checkpoints").iterdir())
        self.assertEqual(names, ["step_0000010", "step_0000020"])

    def test_reproducible(self):
        """Test identical settings and seed give identical logs and checkpoints."""
        experiment = tiny_experiment(total_steps=30)
        with tempfile.TemporaryDirectory() as tmp:
            first = train(experiment, 1, Path(tmp) / "a")
            second = train(experiment, 1, Path(tmp) / "b")
            logs = [(Path(tmp) / name / "train.csv").read_bytes() for name in ("a", "b")]
        self.assertEqual(first.digest, second.digest)
        self.assertEqual(logs[0], logs[1])
        pd.testing.assert_frame_equal(first.rewards, second.rewards)


class EvaluateTest(TestCase):
    """Test greedy evaluation."""

    def setUp(self):
        self.experiment = tiny_experiment()
        self.agent = MoecAgent(self.experiment.agent, seed=0)

    def test_zero_episodes(self):
        """Test zero episodes give the empty summary."""
        evaluation = evaluate(self.agent, self.experiment, 0)
        self.assertEqual(evaluation.metrics, [])
        self.assertTrue(evaluation.summary.empty)

    def test_deterministic_and_parallel(self):
        """Test repeated and threaded evaluation give the same metrics."""
        first = evaluate(self.agent, self.experiment, 3, seed=4)
        second = evaluate(self.agent, self.experiment, 3, seed=4)
        threaded = evaluate(self.agent, self.experiment, 3, seed=4, workers=2)
        rows = [[m.as_row() for m in e.metrics] for e in (first, second, threaded)]
        self.assertEqual(rows[0], rows[1])
        self.assertEqual(rows[0], rows[2])
        self.assertTrue(0.0 <= first.summary.collision_rate <= 100.0)

    def test_road_mismatch(self):
        """Test a checkpoint is refused on a road with another lane count."""
        other = replace(self.experiment, env=replace(self.experiment.env, road=RoadSpec(lane_count=4)))
        with self.assertRaises(CheckpointError):
            evaluate(self.agent, other, 1)

    def test_source_checks(self):
        """Test unknown sources and HighD without a recording are refused."""
        with self.assertRaises(ConfigError):
            evaluate(self.agent, self.experiment, 1, source="carla")
        with self.assertRaises(ConfigError):
            evaluate(self.agent, self.experiment, 1, source="highd")


class LearningSummaryTest(TestCase):
    """Test learning-curve summaries."""

    def setUp(self):
        self.rewards = pd.DataFrame({"step": np.arange(20), "r_all": [-1.0] * 10 + [-0.5] * 10})
        self.log = pd.DataFrame({"step": [5, 10, 15, 20], "unsafe": [1, 0, 0, 0]})

    def test_windows_and_quarters(self):
        """Test first and last windows and quarter collision rates."""
        summary = learning_summary(self.rewards, self.log, window=5)
        self.assertEqual(summary.first_window_mean, -1.0)
        self.assertEqual(summary.last_window_mean, -0.5)
        self.assertEqual(summary.improvement, 0.5)
        self.assertEqual(summary.cr_first_quarter, 100.0)
        self.assertEqual(summary.cr_last_quarter, 0.0)

    def test_steps_to_threshold(self):
        """Test the first step whose trailing mean reaches the threshold."""
        self.assertEqual(steps_to_threshold(self.rewards, -0.5, window=5), 15)
        self.assertIsNone(steps_to_threshold(self.rewards, 0.0, window=5))

    def test_empty_run(self):
        """Test a run without steps has undefined summaries."""
        summary = learning_summary(self.rewards.iloc[:0], self.log.iloc[:0])
        self.assertTrue(math.isnan(summary.first_window_mean))


@pytest.mark.slow
class AblationTest(TestCase):
    """Test ablation runs."""

    def test_two_modes(self):
        """Test every (mode, seed) pair gets a row and the CSV is written."""
        with tempfile.TemporaryDirectory() as tmp:
            frame = run_ablation(tiny_experiment(total_steps=30), ["full", "hpa_mo"], [0], tmp)
            self.assertTrue((Path(tmp) / "ablation.csv").is_file())
            self.assertTrue((Path(tmp) / "hpa_mo" / "seed_0" / "checkpoint").is_dir())
        self.assertEqual(list(frame.columns), list(ABLATION_COLUMNS))
        self.assertEqual(list(frame["mode"]), ["full", "hpa_mo"])

    def test_unknown_mode_fails_early(self):
        """Test an unknown mode is refused before any training."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                run_ablation(tiny_experiment(), ["full", "dqn"], [0], tmp)
            self.assertEqual(list(Path(tmp).iterdir()), [])
