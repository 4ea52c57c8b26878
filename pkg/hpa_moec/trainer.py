"""
Training loop, evaluation and ablation runs.

One environment, one gradient step per environment step once the replay
buffer holds ``warmup`` transitions. Evaluation runs greedy episodes and can
fan them out over threads, each with its own environment and agent snapshot.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .action import ControllerConfig, ControlCommand, HybridController
from .agent import AgentConfig, Batch, MoecAgent, Transition
from .env import OBS_DIM, EgoControls, EgoObservation, EnvConfig, Highway, HighwayBase, IdmParams, MobilParams
from .exceptions import CheckpointError, ConfigError, NumericalError
from .explore import ExplorationSchedule, ExploreConfig, act
from .highd import LOWER, UPPER, Recording, evaluate_recording
from .reward import RewardConfig, objective_rewards, r_all
from .rollout import (  # noqa: F401
    EpisodeMetrics,
    MetricsSummary,
    aggregate_metrics,
    episode_metrics,
    lane_change_count,
    outcome_rewards,
    run_episode,
    write_metrics,
)
from .utils import file_sha256, spawn_seeds, text_sha256

logger = logging.getLogger(__name__)

MODES = ("full", "hpa_mo", "hpa", "da_mo")
EVAL_SOURCES = ("simulator", "highd")
TRAIN_LOG_COLUMNS = (
    "step",
    "episode",
    "total_reward",
    "r_safe",
    "r_gen",
    "cr_running",
    "sigma2_state",
    "loss_critic_mean",
    "loss_actor",
    "varsigma",
    "unsafe",
)
REWARD_COLUMNS = ("step", "r_safe", "r_eff", "r_comf", "r_int", "r_gen", "r_all", "f_unsafe")
UNCERTAINTY_COLUMNS = ("step", "sigma2_llc", "sigma2_lk", "sigma2_rlc", "sigma2_state", "branch")
ABLATION_COLUMNS = (
    "mode",
    "seed",
    "first_window_mean",
    "last_window_mean",
    "improvement",
    "cr_first_quarter",
    "cr_last_quarter",
    "steps_to_threshold",
)


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop settings; ``warmup`` 0 means four batches."""

    total_steps: int = 200000
    warmup: int = 0
    buffer_size: int = 40000
    mode: str = "full"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    checkpoint_every: int = 10000
    eval_episodes: int = 200
    max_nonfinite: int = 10
    workers: int = 1
    window: int = 1000
    lane_change_debounce: float = 1.0
    min_episode_seconds: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.total_steps < 0 or self.warmup < 0 or self.checkpoint_every < 0:
            raise ConfigError("trainer.total_steps, warmup and checkpoint_every must be >= 0")
        if self.buffer_size < 1 or self.workers < 1 or self.window < 1:
            raise ConfigError("trainer.buffer_size, workers and window must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode '{self.mode}'. Supported: {', '.join(MODES)}")
        if not self.seeds:
            raise ConfigError("trainer.seeds must name at least one seed")

    def resolved_warmup(self, batch_size: int) -> int:
        warmup = self.warmup or 4 * batch_size
        if warmup < batch_size:
            raise ConfigError(f"trainer.warmup ({warmup}) must be >= agent.batch_size ({batch_size})")
        if warmup > self.buffer_size:
            raise ConfigError(f"trainer.warmup ({warmup}) exceeds trainer.buffer_size ({self.buffer_size})")
        return warmup


@dataclass(frozen=True)
class ModeSettings:
    """What an ablation mode changes; ``ensemble_size`` None keeps the configured M."""

    mode: str
    objectives: int
    ensemble_size: Optional[int]
    exploration: str
    discrete_only: bool
    lateral: str


def ablation_mode(mode: str) -> ModeSettings:
    """
    Settings of an ablation mode.

    full keeps everything; hpa_mo uses one critic per objective and random
    exploration; hpa additionally collapses the objectives into r_all; da_mo is
    hpa_mo with fixed continuous parameters and PD lane-centre steering.
    """
    settings = {
        "full": ModeSettings("full", 2, None, "uncertainty", False, "stanley"),
        "hpa_mo": ModeSettings("hpa_mo", 2, 1, "random", False, "stanley"),
        "hpa": ModeSettings("hpa", 1, 1, "random", False, "stanley"),
        "da_mo": ModeSettings("da_mo", 2, 1, "random", True, "pid"),
    }
    if mode not in settings:
        raise ConfigError(f"Unknown mode '{mode}'. Supported: {', '.join(MODES)}")
    return settings[mode]


@dataclass(frozen=True)
class Experiment:
    """Every module's settings for one run."""

    env: EnvConfig = field(default_factory=EnvConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_mode(self, mode: Optional[str] = None) -> "Experiment":
        """Apply an ablation mode (default ``train.mode``) to the agent, explorer and controller."""
        settings = ablation_mode(mode or self.train.mode)
        weights = self.reward.weights if settings.objectives == len(self.reward.weights) else (1.0,)
        agent = replace(
            self.agent,
            objectives=settings.objectives,
            weights=weights,
            ensemble_size=settings.ensemble_size or self.agent.ensemble_size,
            discrete_only=settings.discrete_only,
        )
        return replace(
            self,
            agent=agent,
            explore=replace(self.explore, source=settings.exploration),
            controller=replace(self.controller, lateral=settings.lateral),
            train=replace(self.train, mode=settings.mode),
        )

    def highway(self) -> Highway:
        return Highway(self.env, self.idm, self.mobil)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored column-wise."""

    def __init__(self, capacity: int, objectives: int, state_dim: int = OBS_DIM, action_dim: int = 6):
        if capacity < 1:
            raise ConfigError("Replay buffer capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.parameters = np.zeros((capacity, action_dim))
        self.options = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros((capacity, objectives))
        self.next_states = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.insertions = 0

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def add(self, transition: Transition) -> None:
        slot = self.insertions % self.capacity
        self.states[slot] = transition.state
        self.parameters[slot] = transition.parameters
        self.options[slot] = transition.option
        self.rewards[slot] = transition.rewards
        self.next_states[slot] = transition.next_state
        self.done[slot] = transition.done
        self.insertions += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample without replacement within the batch."""
        if batch_size > len(self):
            raise ConfigError(f"Cannot sample {batch_size} transitions from {len(self)}")
        rows = rng.choice(len(self), size=batch_size, replace=False)
        return Batch(
            self.states[rows],
            self.parameters[rows],
            self.options[rows],
            self.rewards[rows],
            self.next_states[rows],
            self.done[rows],
        )


class AgentPolicy:
    """Greedy agent plus controller as a rollout policy; the controller follows the env's road."""

    def __init__(self, agent: MoecAgent, controller_config: ControllerConfig):
        self.agent = agent
        self.controller_config = controller_config
        self.controller: Optional[HybridController] = None
        self.last_command: Optional[ControlCommand] = None

    def __call__(self, observation: EgoObservation, env: HighwayBase) -> EgoControls:
        if self.controller is None or self.controller.road != env.road:
            self.controller = HybridController(self.controller_config, env.road)
        decision = act(self.agent, observation.vector, ExploreConfig(), 0.0, None, mode="greedy")
        self.last_command = self.controller.command(env.ego, decision.action)
        return self.last_command.controls


def checkpoint_digest(directory: Union[str, Path]) -> str:
    """SHA-256 over every file of a checkpoint directory, in name order."""
    directory = Path(directory)
    parts = [f"{p.name}:{file_sha256(p)}" for p in sorted(directory.iterdir()) if p.is_file()]
    return text_sha256("\n".join(parts))


def check_compatible(agent: MoecAgent, env: EnvConfig) -> None:
    """
    Raises:
        CheckpointError: If the checkpoint was trained on a different road
    """
    space, road = agent.config.space, env.road
    if space.lane_count != road.lane_count or abs(space.lane_width - road.lane_width) > 1e-9:
        raise CheckpointError(
            f"Checkpoint road ({space.lane_count} lanes of {space.lane_width} m) does not "
            f"match the evaluation road ({road.lane_count} lanes of {road.lane_width} m)"
        )


@dataclass
class TrainResult:
    output_dir: Path
    checkpoint: Path
    digest: str
    steps: int
    episodes: int
    log: pd.DataFrame
    rewards: pd.DataFrame


class Trainer:
    """Runs one seed of one experiment and writes its artifacts to ``output_dir``."""

    def __init__(self, experiment: Experiment, seed: int, output_dir: Union[str, Path]):
        self.experiment = experiment
        self.seed = int(seed)
        self.output_dir = Path(output_dir)
        agent_seed, env_seed, explore_seed, buffer_seed = spawn_seeds(self.seed, 4)
        self.agent = MoecAgent(experiment.agent, seed=agent_seed)
        self.env = experiment.highway()
        self.controller = HybridController(experiment.controller, self.env.road)
        self.buffer = ReplayBuffer(experiment.train.buffer_size, experiment.agent.objectives)
        self.schedule = ExplorationSchedule.from_config(experiment.explore, experiment.train.total_steps)
        self.env_rng = np.random.default_rng(env_seed)
        self.rng = np.random.default_rng(explore_seed)
        self.buffer_rng = np.random.default_rng(buffer_seed)
        self.warmup = experiment.train.resolved_warmup(experiment.agent.batch_size)
        self.log_rows: List[Dict[str, float]] = []
        self.reward_rows: List[tuple] = []
        self.uncertainty_rows: List[tuple] = []

    def _reset(self) -> EgoObservation:
        return self.env.reset(seed=int(self.env_rng.integers(2**32)), density=self.experiment.env.density)

    def write_traces(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        log = pd.DataFrame(self.log_rows, columns=list(TRAIN_LOG_COLUMNS))
        rewards = pd.DataFrame(self.reward_rows, columns=list(REWARD_COLUMNS))
        log.to_csv(self.output_dir / "train.csv", index=False)
        rewards.to_csv(self.output_dir / "rewards.csv", index=False)
        pd.DataFrame(self.uncertainty_rows, columns=list(UNCERTAINTY_COLUMNS)).to_csv(
            self.output_dir / "uncertainty.csv", index=False
        )
        return log, rewards

    def run(self) -> TrainResult:
        """
        Train for ``train.total_steps`` environment steps.

        Returns:
            Paths, digest and traces of the run

        Raises:
            NumericalError: If updates keep failing for more than ``train.max_nonfinite`` steps
        """
        experiment = self.experiment
        train, weights = experiment.train, experiment.reward.weights
        started = time.monotonic()
        logger.info(
            f"Training mode={train.mode} seed={self.seed} steps={train.total_steps} "
            f"({self.agent.description}) into {self.output_dir}"
        )
        observation = self._reset()
        episode, finished, unsafe_episodes, streak = 0, 0, 0, 0
        totals = np.zeros(3)
        variances: List[float] = []
        diagnostics = None

        for step in range(train.total_steps):
            varsigma = self.schedule.value(step)
            state = observation.vector
            decision = act(self.agent, state, experiment.explore, varsigma, self.rng)
            command = self.controller.command(self.env.ego, decision.action)
            outcome = self.env.step(command.controls)
            rewards = outcome_rewards(self.env, outcome, experiment.reward)
            total = r_all(rewards, weights)
            self.buffer.add(
                Transition(
                    state,
                    decision.parameters,
                    int(decision.action.option),
                    objective_rewards(rewards, experiment.agent.objectives, weights),
                    outcome.observation.vector,
                    outcome.f_unsafe,
                )
            )
            self.reward_rows.append(
                (step, rewards.r_safe, rewards.r_eff, rewards.r_comf, rewards.r_int, rewards.r_gen, total, int(outcome.f_unsafe))
            )
            report = decision.report
            if report is not None:
                self.uncertainty_rows.append((step, *report.total, report.state, decision.branch))
                variances.append(report.state)

            if len(self.buffer) >= self.warmup:
                diagnostics = self.agent.update(self.buffer.sample(experiment.agent.batch_size, self.buffer_rng))
                streak = streak + 1 if diagnostics.skipped else 0
                if streak > train.max_nonfinite:
                    raise NumericalError(
                        f"{streak} consecutive updates with non-finite losses or gradients at step "
                        f"{step}; critic losses {diagnostics.critic_losses.tolist()}, "
                        f"actor loss {diagnostics.actor_loss}"
                    )

            totals += (total, rewards.r_safe, rewards.r_gen)
            if outcome.done:
                finished += 1
                unsafe_episodes += int(outcome.f_unsafe)
                self.log_rows.append(
                    {
                        "step": step + 1,
                        "episode": episode,
                        "total_reward": totals[0],
                        "r_safe": totals[1],
                        "r_gen": totals[2],
                        "cr_running": 100.0 * unsafe_episodes / finished,
                        "sigma2_state": float(np.mean(variances)) if variances else float("nan"),
                        "loss_critic_mean": diagnostics.critic_loss_mean if diagnostics else float("nan"),
                        "loss_actor": diagnostics.actor_loss if diagnostics else float("nan"),
                        "varsigma": varsigma,
                        "unsafe": int(outcome.f_unsafe),
                    }
                )
                logger.info(
                    f"Episode {episode} ended at step {step + 1}: reward {totals[0]:.2f}, "
                    f"unsafe={outcome.f_unsafe}, running CR {100.0 * unsafe_episodes / finished:.1f}%"
                )
                episode += 1
                totals[:] = 0.0
                variances = []
                observation = self._reset()
            else:
                observation = outcome.observation

            if train.checkpoint_every and (step + 1) % train.checkpoint_every == 0:
                self.agent.save(self.output_dir / "checkpoints" / f"step_{step + 1:07d}")
                self.write_traces()

        checkpoint = self.agent.save(self.output_dir / "checkpoint", extra={"mode": train.mode})
        log, rewards = self.write_traces()
        digest = checkpoint_digest(checkpoint)
        logger.info(
            f"Finished seed {self.seed}: {finished} episodes in {time.monotonic() - started:.1f} s, "
            f"checkpoint {digest[:12]}"
        )
        return TrainResult(self.output_dir, checkpoint, digest, train.total_steps, finished, log, rewards)


def train(experiment: Experiment, seed: int, output_dir: Union[str, Path]) -> TrainResult:
    return Trainer(experiment, seed, output_dir).run()


@dataclass
class Evaluation:
    metrics: List[EpisodeMetrics]
    summary: MetricsSummary


def _simulator_episode(agent: MoecAgent, experiment: Experiment, episode_seed: int) -> EpisodeMetrics:
    env = experiment.highway()
    observation = env.reset(seed=episode_seed, density=experiment.env.density)
    policy = AgentPolicy(agent, experiment.controller)
    record = run_episode(env, observation, policy, experiment.reward, experiment.reward.weights, seed=episode_seed)
    return episode_metrics(record, experiment.train.lane_change_debounce)


def evaluate(
    agent: MoecAgent,
    experiment: Experiment,
    episodes: int,
    seed: int = 0,
    source: str = "simulator",
    recording: Optional[Recording] = None,
    workers: int = 1,
) -> Evaluation:
    """
    Greedy evaluation in the simulator or on a HighD recording.

    Args:
        agent: Trained agent; workers get read-only snapshots
        experiment: Settings of the evaluation environment
        episodes: Number of episodes; 0 gives an empty summary
        seed: Root seed of the episode layouts or the vehicle choice
        source: "simulator" or "highd"
        recording: Required for the highd source
        workers: Thread count for simulator episodes

    Returns:
        Per-episode metrics and their aggregate
    """
    if source not in EVAL_SOURCES:
        raise ConfigError(f"Unknown evaluation source '{source}'. Supported: {', '.join(EVAL_SOURCES)}")
    if episodes < 0:
        raise ConfigError(f"Episode count must be >= 0, got {episodes}")

    if source == "highd":
        if recording is None:
            raise ConfigError("Evaluation on HighD needs a recording (--data)")
        lanes = {recording.meta.lane_count(d) for d in (LOWER, UPPER)} - {0}
        if lanes != {agent.config.space.lane_count}:
            raise CheckpointError(
                f"Checkpoint expects {agent.config.space.lane_count} lanes, recording has {sorted(lanes)}"
            )

        def policy_factory():
            return AgentPolicy(agent, experiment.controller)

        metrics = evaluate_recording(
            recording,
            policy_factory,
            episodes,
            seed,
            experiment.env,
            experiment.reward,
            experiment.reward.weights,
            experiment.train.min_episode_seconds,
            experiment.train.lane_change_debounce,
        )
    else:
        check_compatible(agent, experiment.env)
        seeds = spawn_seeds(seed, episodes) if episodes else []
        if workers > 1 and len(seeds) > 1:
            results: Dict[int, EpisodeMetrics] = {}
            with ThreadPoolExecutor(max_workers=workers) as executor:
                futures = {
                    executor.submit(_simulator_episode, agent.snapshot(), experiment, s): index
                    for index, s in enumerate(seeds)
                }
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
            metrics = [results[index] for index in range(len(seeds))]
        else:
            metrics = [_simulator_episode(agent, experiment, s) for s in seeds]

    summary = aggregate_metrics(metrics)
    if summary.empty:
        logger.info("Evaluation finished: no episodes evaluated")
    else:
        logger.info(f"Evaluated {summary.episodes} episodes on {source}: CR {summary.collision_rate:.2f}%")
    return Evaluation(metrics, summary)


@dataclass
class LearningSummary:
    """Reward windows at both ends of a run and collision rates of its first and last quarter."""

    first_window_mean: float
    last_window_mean: float
    cr_first_quarter: float
    cr_last_quarter: float

    @property
    def improvement(self) -> float:
        """Relative gain of the last window over the first."""
        if self.first_window_mean == 0:
            return float("nan")
        return (self.last_window_mean - self.first_window_mean) / abs(self.first_window_mean)


def _quarter_rate(log: pd.DataFrame, low: float, high: float) -> float:
    ended = log[(log["step"] > low) & (log["step"] <= high)]
    if ended.empty:
        return float("nan")
    return 100.0 * float(ended["unsafe"].mean())


def learning_summary(rewards: pd.DataFrame, log: pd.DataFrame, window: int = 1000) -> LearningSummary:
    total = len(rewards)
    if total == 0:
        nan = float("nan")
        return LearningSummary(nan, nan, nan, nan)
    values = rewards["r_all"].to_numpy()
    quarter = total / 4.0
    return LearningSummary(
        first_window_mean=float(values[:window].mean()),
        last_window_mean=float(values[-window:].mean()),
        cr_first_quarter=_quarter_rate(log, 0, quarter),
        cr_last_quarter=_quarter_rate(log, 3 * quarter, total),
    )


def steps_to_threshold(rewards: pd.DataFrame, threshold: float, window: int = 1000) -> Optional[int]:
    """Environment steps until the trailing ``window`` mean of r_all first reaches ``threshold``."""
    rolling = rewards["r_all"].rolling(window).mean().to_numpy()
    hits = np.flatnonzero(rolling >= threshold)
    if hits.size == 0:
        return None
    return int(rewards["step"].iloc[hits[0]]) + 1


def run_ablation(
    experiment: Experiment,
    modes: Sequence[str],
    seeds: Sequence[int],
    output_dir: Union[str, Path],
) -> pd.DataFrame:
    """
    Train every mode on the same seeds and compare them.

    The reward threshold for ``steps_to_threshold`` is the median final-window
    mean of the full mode (of all runs when full is not among ``modes``).

    Returns:
        One row per (mode, seed), also written to ``ablation.csv``
    """
    output_dir = Path(output_dir)
    for mode in modes:
        ablation_mode(mode)
    runs = []
    for mode in modes:
        configured = experiment.with_mode(mode)
        for seed in seeds:
            result = train(configured, seed, output_dir / mode / f"seed_{seed}")
            summary = learning_summary(result.rewards, result.log, configured.train.window)
            runs.append((mode, seed, result, summary))

    reference = [s.last_window_mean for mode, _, _, s in runs if mode == "full"] or [s.last_window_mean for *_, s in runs]
    threshold = float(np.median(reference)) if reference else float("nan")
    rows = []
    for mode, seed, result, summary in runs:
        reached = steps_to_threshold(result.rewards, threshold, experiment.train.window)
        rows.append(
            (
                mode,
                seed,
                summary.first_window_mean,
                summary.last_window_mean,
                summary.improvement,
                summary.cr_first_quarter,
                summary.cr_last_quarter,
                np.nan if reached is None else reached,
            )
        )
    frame = pd.DataFrame(rows, columns=list(ABLATION_COLUMNS))
    output_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(output_dir / "ablation.csv", index=False)
    medians = frame.groupby("mode", sort=False)[["last_window_mean", "improvement", "steps_to_threshold"]].median()
    logger.info(f"Ablation threshold {threshold:.4f}; medians per mode:\n{medians.to_string()}")
    return frame
