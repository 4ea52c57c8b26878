"""
Episode rollouts and the evaluation metrics computed from them.

Shared by simulator evaluation and HighD replay so both paths produce rewards
and metrics the same way.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .env import EgoControls, EgoObservation, HighwayBase, StepOutcome
from .reward import RewardConfig, RewardVector, r_all, step_rewards
from .utils import quartiles

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("AR", "AS", "NL", "VS", "VA", "CR")
METRIC_FIELDS = {
    "AR": "average_reward",
    "AS": "average_speed",
    "NL": "lane_changes",
    "VS": "steer_variance",
    "VA": "accel_variance",
}
EMPTY_MARKER = "no episodes evaluated"

Policy = Callable[[EgoObservation, HighwayBase], EgoControls]


def outcome_rewards(env: HighwayBase, outcome: StepOutcome, config: RewardConfig) -> RewardVector:
    """Reward vector of the step that produced ``outcome``."""
    return step_rewards(
        speed=env.ego.speed,
        steer=outcome.applied.steer,
        accel=outcome.applied.accel,
        sv_accels=outcome.sv_accels,
        f_unsafe=outcome.f_unsafe,
        ttc=env.ttc_to_leader(config.ttc_max),
        config=config,
    )


@dataclass
class EpisodeRecord:
    """Per-step EV trace of one episode."""

    dt: float
    seed: Optional[int] = None
    lane_ids: List[int] = field(default_factory=list)
    speeds: List[float] = field(default_factory=list)
    steers: List[float] = field(default_factory=list)
    accels: List[float] = field(default_factory=list)
    xs: List[float] = field(default_factory=list)
    ys: List[float] = field(default_factory=list)
    rewards: List[RewardVector] = field(default_factory=list)
    total_rewards: List[float] = field(default_factory=list)
    collision: bool = False
    off_road: bool = False
    truncated: bool = False

    @property
    def steps(self) -> int:
        return len(self.speeds)

    @property
    def unsafe(self) -> bool:
        return self.collision or self.off_road


def run_episode(
    env: HighwayBase,
    observation: EgoObservation,
    policy: Policy,
    reward_config: RewardConfig,
    weights: Sequence[float],
    seed: Optional[int] = None,
) -> EpisodeRecord:
    """
    Drive an already reset environment with ``policy`` until the episode ends.

    Args:
        env: Reset simulator or replay environment
        observation: Observation returned by the reset
        policy: Maps (observation, env) to controls
        reward_config: Reward constants
        weights: Objective weights for the total reward
        seed: Recorded with the episode

    Returns:
        The episode's EpisodeRecord
    """
    record = EpisodeRecord(dt=env.config.dt, seed=seed)
    record.lane_ids.append(env.ego.lane_id)
    while True:
        outcome = env.step(policy(observation, env))
        rewards = outcome_rewards(env, outcome, reward_config)
        ego = env.ego
        record.lane_ids.append(ego.lane_id)
        record.speeds.append(ego.speed)
        record.steers.append(outcome.applied.steer)
        record.accels.append(outcome.applied.accel)
        record.xs.append(ego.x)
        record.ys.append(ego.y)
        record.rewards.append(rewards)
        record.total_rewards.append(r_all(rewards, weights))
        observation = outcome.observation
        if outcome.done:
            record.collision = outcome.collision
            record.off_road = outcome.off_road
            record.truncated = outcome.truncated
            break
    logger.debug(
        f"Episode seed={seed} ended after {record.steps} steps "
        f"(collision={record.collision}, off_road={record.off_road})"
    )
    return record


def lane_change_count(
    lane_ids: Union[Sequence[int], np.ndarray, pd.Series],
    dt: float,
    debounce: float = 1.0,
) -> int:
    """
    Lanes crossed by lane changes that persist at least ``debounce`` seconds.

    A lane occupied for less than the debounce time is ignored, including
    the final one; a persisted change of k lanes counts k.
    """
    lanes = np.asarray(lane_ids, dtype=int)
    if lanes.size == 0:
        return 0
    boundaries = np.flatnonzero(np.diff(lanes)) + 1
    starts = np.concatenate([[0], boundaries])
    lengths = np.diff(np.concatenate([starts, [lanes.size]]))
    settled = lanes[0]
    count = 0
    for start, length in zip(starts[1:], lengths[1:]):
        lane = lanes[start]
        if length * dt + 1e-9 < debounce or lane == settled:
            continue
        count += abs(int(lane) - int(settled))
        settled = lane
    return count


@dataclass
class EpisodeMetrics:
    """Evaluation metrics of one episode."""

    average_reward: float
    average_speed: float
    lane_changes: int
    steer_variance: float
    accel_variance: float
    unsafe: bool
    collision: bool
    off_road: bool
    steps: int
    seed: Optional[int] = None
    ego_id: Optional[int] = None

    def as_row(self) -> Dict[str, object]:
        row = asdict(self)
        row["unsafe"] = int(self.unsafe)
        row["collision"] = int(self.collision)
        row["off_road"] = int(self.off_road)
        return row


def episode_metrics(record: EpisodeRecord, debounce: float = 1.0) -> EpisodeMetrics:
    """AR, AS, NL, VS and VA of one episode; variances are population variances."""
    if record.steps == 0:
        nan = float("nan")
        return EpisodeMetrics(nan, nan, 0, nan, nan, record.unsafe, record.collision, record.off_road, 0, record.seed)
    return EpisodeMetrics(
        average_reward=float(np.mean(record.total_rewards)),
        average_speed=float(np.mean(record.speeds)),
        lane_changes=lane_change_count(record.lane_ids, record.dt, debounce),
        steer_variance=float(np.var(record.steers)),
        accel_variance=float(np.var(record.accels)),
        unsafe=record.unsafe,
        collision=record.collision,
        off_road=record.off_road,
        steps=record.steps,
        seed=record.seed,
    )


@dataclass
class MetricsSummary:
    """Means over episodes, collision rate in percent and per-metric quartiles."""

    episodes: int
    means: Dict[str, float]
    collision_rate: float
    collisions: int
    off_road: int
    spread: Dict[str, Dict[str, float]]

    @property
    def empty(self) -> bool:
        return self.episodes == 0

    def table(self) -> str:
        """Two-line summary in AR, AS, NL, VS, VA, CR order."""
        if self.empty:
            return EMPTY_MARKER
        values = dict(self.means, CR=self.collision_rate)
        header = "  ".join(f"{name:>10}" for name in SUMMARY_COLUMNS)
        row = "  ".join(f"{values[name]:>10.4f}" for name in SUMMARY_COLUMNS)
        return f"{header}\n{row}"


def aggregate_metrics(metrics: Sequence[EpisodeMetrics]) -> MetricsSummary:
    if not metrics:
        return MetricsSummary(0, {}, float("nan"), 0, 0, {})
    means, spread = {}, {}
    for name, attribute in METRIC_FIELDS.items():
        values = [float(getattr(m, attribute)) for m in metrics]
        finite = [v for v in values if math.isfinite(v)]
        means[name] = float(np.mean(finite)) if finite else float("nan")
        spread[name] = quartiles(finite) if finite else {}
    unsafe = sum(m.unsafe for m in metrics)
    return MetricsSummary(
        episodes=len(metrics),
        means=means,
        collision_rate=100.0 * unsafe / len(metrics),
        collisions=sum(m.collision for m in metrics),
        off_road=sum(m.off_road for m in metrics),
        spread=spread,
    )


def write_metrics(
    metrics: Sequence[EpisodeMetrics], summary: MetricsSummary, directory: Union[str, Path]
) -> Path:
    """
    Write ``metrics.csv`` (one row per episode) and ``summary.txt``.

    Returns:
        The metrics CSV path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = list(EpisodeMetrics.__dataclass_fields__)
    frame = pd.DataFrame([m.as_row() for m in metrics], columns=columns)
    path = directory / "metrics.csv"
    frame.to_csv(path, index=False)

    lines = [summary.table()]
    if not summary.empty:
        lines.append(
            f"episodes={summary.episodes} collisions={summary.collisions} "
            f"off_road={summary.off_road}"
        )
        for name, stats in summary.spread.items():
            if stats:
                lines.append(f"{name}: " + " ".join(f"{k}={v:.4f}" for k, v in stats.items()))
    (directory / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote metrics for {summary.episodes} episodes to {directory}")
    return path
