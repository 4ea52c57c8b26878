"""
Vector reward: a safety objective and a general-performance objective.

The general-performance reward sums efficiency, comfort and interaction terms;
``r_all`` collapses the vector with the objective weights.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError

COLLISION_PENALTY = 10.0
TTC_BONUS = 0.5
COMFORT_WEIGHT = 0.5
INTERACTION_WEIGHT = 0.1
WEIGHT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RewardConfig:
    """Reward constants; ``weights`` are (safety, general) and sum to 1."""

    target_speed: float = 12.0
    low_speed: float = 6.0
    ttc_max: float = 5.0
    steer_max: float = 0.6
    accel_max: float = 3.0
    weights: Tuple[float, ...] = (0.4, 0.6)
    eff_negated: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if abs(sum(self.weights) - 1.0) > WEIGHT_TOLERANCE:
            raise ConfigError(f"reward.weights must sum to 1, got {self.weights}")
        if not 0 < self.low_speed < self.target_speed:
            raise ConfigError(
                "reward.low_speed must be positive and below reward.target_speed"
            )
        if self.ttc_max <= 0 or self.steer_max <= 0 or self.accel_max <= 0:
            raise ConfigError("reward.ttc_max and the control limits must be > 0")


@dataclass(frozen=True)
class RewardVector:
    """Per-step objective rewards with the general-performance breakdown."""

    r_safe: float
    r_eff: float
    r_comf: float
    r_int: float

    @property
    def r_gen(self) -> float:
        return self.r_eff + self.r_comf + self.r_int

    def as_array(self) -> np.ndarray:
        return np.array([self.r_safe, self.r_gen])


def r_safe(f_unsafe: bool, ttc: float, t_max: float) -> float:
    """-10 on an unsafe step plus 0.5 * saturated TTC/t_max."""
    saturated = min(max(ttc / t_max, 0.0), 1.0)
    return -COLLISION_PENALTY * float(bool(f_unsafe)) + TTC_BONUS * saturated


def r_efficiency(speed: float, config: RewardConfig) -> float:
    deviation = abs(speed - config.target_speed) / config.target_speed
    slow = max(0.0, (config.low_speed - speed) / config.low_speed)
    if config.eff_negated:
        return -deviation - slow
    return deviation - slow


def r_gen(
    speed: float,
    steer: float,
    accel: float,
    sv_accels: Sequence[float],
    config: RewardConfig,
) -> Tuple[float, float, float]:
    """
    General-performance components.

    Args:
        speed: EV speed (m/s)
        steer: Applied steering angle (rad)
        accel: Applied acceleration (m/s^2)
        sv_accels: Observed SV accelerations, 0 for absent slots
        config: Reward constants

    Returns:
        (r_eff, r_comf, r_int); their sum is r_gen
    """
    comfort = -COMFORT_WEIGHT * abs(steer) / config.steer_max
    comfort -= COMFORT_WEIGHT * abs(accel) / config.accel_max
    interaction = -INTERACTION_WEIGHT * float(np.sum(np.abs(sv_accels))) / config.accel_max
    return r_efficiency(speed, config), comfort, interaction


def step_rewards(
    *,
    speed: float,
    steer: float,
    accel: float,
    sv_accels: Sequence[float],
    f_unsafe: bool,
    ttc: float,
    config: RewardConfig,
) -> RewardVector:
    """Reward vector of one simulator step."""
    eff, comf, inter = r_gen(speed, steer, accel, sv_accels, config)
    return RewardVector(r_safe(f_unsafe, ttc, config.ttc_max), eff, comf, inter)


def r_all(rewards: Union[RewardVector, Sequence[float]], weights: Sequence[float]) -> float:
    """Weighted sum of the objective rewards."""
    values = rewards.as_array() if isinstance(rewards, RewardVector) else np.asarray(rewards, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape != weights.shape:
        raise ConfigError(f"{values.size} rewards but {weights.size} weights")
    return float(values @ weights)


def objective_rewards(rewards: RewardVector, objectives: int, weights: Sequence[float]) -> np.ndarray:
    """Reward vector fed to the critics: both objectives, or r_all alone."""
    if objectives == 1:
        return np.array([r_all(rewards, weights)])
    return rewards.as_array()
