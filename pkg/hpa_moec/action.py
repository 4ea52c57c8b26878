"""
Hybrid parameterized action machinery.

A hybrid action is a discrete option (left lane change, lane keep, right lane
change) plus continuous parameters (path length ``l``, acceleration ``acc``).
The option and ``l`` define a quintic guiding path from the current pose; a
Stanley controller turns the path into a steering angle. The ``da_mo`` ablation
replaces path tracking with a PD lane-centre controller.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from .env import EgoControls, EgoObservation, RoadSpec, VehicleState
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

N_OPTIONS = 3
PARAMS_PER_OPTION = 2
ACTION_DIM = N_OPTIONS * PARAMS_PER_OPTION
LATERAL_CONTROLLERS = ("stanley", "pid")
# Start headings are limited so the path slope stays finite.
MAX_START_HEADING = 1.2


class DiscreteOption(IntEnum):
    """Lateral decision; the offset sign convention puts +w_r to the right."""

    LLC = 0
    LK = 1
    RLC = 2

    def offset(self, lane_width: float) -> float:
        return {DiscreteOption.LLC: -lane_width, DiscreteOption.LK: 0.0}.get(
            self, lane_width
        )

    def lane_delta(self) -> int:
        """Change of lane index; lane indices grow to the left."""
        return {DiscreteOption.LLC: 1, DiscreteOption.LK: 0, DiscreteOption.RLC: -1}[self]


@dataclass(frozen=True)
class ActionSpace:
    """Vehicle and road constants that shape the continuous action ranges."""

    lane_count: int = 3
    lane_width: float = 4.0
    wheelbase: float = 2.7
    steer_max: float = 0.6
    accel_max: float = 3.0
    brake_max: float = 3.0
    max_path_length: float = 150.0
    min_turn_radius: float = 6.4

    def __post_init__(self):
        if self.brake_max <= 0 or self.accel_max <= 0:
            raise ConfigError("Acceleration limits must be > 0")
        if self.min_turn_radius <= self.lane_width / 4.0:
            raise ConfigError(
                f"Minimum turning radius {self.min_turn_radius:.3f} m must exceed "
                f"lane_width/4 = {self.lane_width / 4.0:.3f} m"
            )
        if self.max_path_length <= 0:
            raise ConfigError("action.max_path_length must be > 0")

    @property
    def scale(self) -> np.ndarray:
        """Per-entry magnitudes of the 6-entry continuous parameter vector."""
        return np.tile([self.max_path_length, self.accel_max], N_OPTIONS)


@dataclass(frozen=True)
class ActionBounds:
    """Ranges of the continuous parameters for one state."""

    l_range: Tuple[float, float]
    acc_range: Tuple[float, float] = (-3.0, 3.0)

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        low = np.tile([self.l_range[0], self.acc_range[0]], N_OPTIONS)
        high = np.tile([self.l_range[1], self.acc_range[1]], N_OPTIONS)
        return low, high

    def clip(self, vector: np.ndarray) -> np.ndarray:
        low, high = self.as_arrays()
        return np.clip(vector, low, high)


@dataclass(frozen=True)
class HybridAction:
    """Discrete option with its path length (m) and acceleration (m/s^2)."""

    option: DiscreteOption
    length: float
    accel: float

    @classmethod
    def from_parameters(cls, option: int, parameters: np.ndarray) -> "HybridAction":
        option = DiscreteOption(int(option))
        base = PARAMS_PER_OPTION * int(option)
        return cls(option, float(parameters[base]), float(parameters[base + 1]))


def path_length_bounds(
    vx: Union[float, np.ndarray],
    lane_width: float,
    min_turn_radius: float,
    brake_max: float,
    max_path_length: float = 150.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Path length range from the turning-radius and braking limits.

    l_min = min(sqrt(4*R0*w - w^2), vx^2 / (2*brake)) and
    l_max = min(exp(|vx| + w), max_path_length), widened to l_min if smaller.
    """
    vx = np.asarray(vx, dtype=float)
    geometric = math.sqrt(4.0 * min_turn_radius * lane_width - lane_width**2)
    low = np.minimum(geometric, vx**2 / (2.0 * brake_max))
    exponent = np.minimum(np.abs(vx) + lane_width, math.log(max_path_length) + 1.0)
    high = np.minimum(np.exp(exponent), max_path_length)
    return low, np.maximum(high, low)


def bounds_for(
    state: Union[EgoObservation, np.ndarray],
    road: RoadSpec,
    min_turn_radius: float,
    acc_max_brake: float,
    max_path_length: float = 150.0,
    accel_max: float = 3.0,
) -> ActionBounds:
    """
    Continuous-parameter ranges for an observation.

    Args:
        state: Observation or its 42-entry vector (EV v_x is entry 4)
        road: Road geometry
        min_turn_radius: R0 in metres
        acc_max_brake: Braking limit used for the stopping distance
        max_path_length: Cap on the exponential upper bound
        accel_max: Acceleration magnitude limit

    Returns:
        The state's ActionBounds
    """
    vector = state.vector if isinstance(state, EgoObservation) else np.asarray(state)
    low, high = path_length_bounds(
        vector[4], road.lane_width, min_turn_radius, acc_max_brake, max_path_length
    )
    return ActionBounds((float(low), float(high)), (-acc_max_brake, accel_max))


def bounds_arrays(vx: np.ndarray, space: ActionSpace) -> Tuple[np.ndarray, np.ndarray]:
    """Batched lower/upper bounds of the 6-entry parameter vector, shape (B, 6)."""
    l_low, l_high = path_length_bounds(
        np.atleast_1d(vx),
        space.lane_width,
        space.min_turn_radius,
        space.brake_max,
        space.max_path_length,
    )
    low = np.empty((l_low.size, ACTION_DIM))
    high = np.empty_like(low)
    low[:, 0::2] = l_low[:, None]
    high[:, 0::2] = l_high[:, None]
    low[:, 1::2] = -space.brake_max
    high[:, 1::2] = space.accel_max
    return low, high


def legal_options(lane_id: int, lane_count: int) -> np.ndarray:
    """Boolean mask of options that keep the EV on the road."""
    return np.array(
        [0 <= lane_id + option.lane_delta() < lane_count for option in DiscreteOption]
    )


def resolve_option(
    option: DiscreteOption, lane_id: int, lane_count: int
) -> Tuple[DiscreteOption, bool]:
    """Remap an illegal lane change to lane keeping; returns (executed, masked)."""
    if legal_options(lane_id, lane_count)[int(option)]:
        return option, False
    return DiscreteOption.LK, True


@dataclass
class GuidingPath:
    """Quintic y(x) in the local coordinate xi = x - x_start."""

    coefficients: np.ndarray
    x_start: float
    length: float
    points: np.ndarray

    @property
    def end(self) -> Tuple[float, float]:
        return self.x_start + self.length, self.y_at(self.x_start + self.length)

    def _local(self, x: float) -> float:
        return min(max(x - self.x_start, 0.0), self.length)

    def y_at(self, x: float) -> float:
        return float(np.polyval(self.coefficients[::-1], self._local(x)))

    def slope_at(self, x: float) -> float:
        if x - self.x_start > self.length:
            return 0.0
        derivative = np.polynomial.polynomial.polyder(self.coefficients)
        return float(np.polyval(derivative[::-1], self._local(x)))

    def curvature_at(self, x: float) -> float:
        xi = self._local(x)
        first = np.polynomial.polynomial.polyder(self.coefficients)
        second = np.polynomial.polynomial.polyder(self.coefficients, 2)
        slope = np.polyval(first[::-1], xi)
        return float(np.polyval(second[::-1], xi) / (1.0 + slope**2) ** 1.5)

    def write(self, path: Union[str, Path]) -> Path:
        """Debug dump: sampled (x, y) rows followed by one coefficient row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.points, columns=["x", "y"])
        frame.to_csv(path, index=False)
        with open(path, "a", encoding="utf-8") as handle:
            handle.write("gamma," + ",".join(repr(float(c)) for c in self.coefficients) + "\n")
        return path


def quintic_coefficients(
    y_start: float, slope_start: float, y_end: float, length: float
) -> np.ndarray:
    """
    Quintic through (0, y_start) and (length, y_end) with the given start slope,
    zero end slope and zero curvature at both ends.
    """
    gamma = np.zeros(6)
    gamma[0] = y_start
    gamma[1] = slope_start
    l = length
    system = np.array(
        [
            [l**3, l**4, l**5],
            [3 * l**2, 4 * l**3, 5 * l**4],
            [6 * l, 12 * l**2, 20 * l**3],
        ]
    )
    rhs = np.array([y_end - y_start - slope_start * l, -slope_start, 0.0])
    gamma[3:] = np.linalg.solve(system, rhs)
    return gamma


def build_path(
    ev: VehicleState,
    option: DiscreteOption,
    length: float,
    road: RoadSpec,
    horizon: int = 30,
    min_length: float = 1.0,
) -> GuidingPath:
    """
    Quintic guiding path from the EV pose to the option's lane-centre target.

    Args:
        ev: Current EV state
        option: Discrete option selecting the target lane
        length: Longitudinal path length l (m)
        road: Road geometry
        horizon: Number of sampled points H_p
        min_length: Shortest accepted path; shorter requests are clamped

    Returns:
        The path with ``horizon`` points sampled uniformly in x over (0, l]
    """
    if not length >= min_length:
        logger.warning(f"Path length {length} below minimum {min_length}; clamping")
        length = min_length
    heading = min(max(ev.heading, -MAX_START_HEADING), MAX_START_HEADING)
    if heading != ev.heading:
        logger.warning(
            f"EV heading {ev.heading:.3f} rad exceeds +-{MAX_START_HEADING} rad; "
            f"path starts at heading {heading:.3f}"
        )
    target = road.lane_center(road.lane_of(ev.y)) - option.offset(road.lane_width)
    gamma = quintic_coefficients(ev.y, math.tan(heading), target, length)
    xi = length * np.arange(1, horizon + 1) / horizon
    points = np.column_stack([ev.x + xi, np.polyval(gamma[::-1], xi)])
    return GuidingPath(gamma, ev.x, length, points)


@dataclass(frozen=True)
class StanleyGains:
    gain: float = 1.0
    soft_speed: float = 1.0


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.1
    kd: float = 0.4
    kh: float = 1.0


def stanley_steer(
    ev: VehicleState,
    path: GuidingPath,
    gains: StanleyGains = StanleyGains(),
    steer_max: float = 0.6,
    wheelbase: float = 2.7,
) -> float:
    """
    Stanley steering toward ``path`` measured at the front axle.

    delta = heading_error + atan(k_e * cross_track / (v_x + v_soft)), clamped
    to +-steer_max. A positive cross-track error means the path lies to the left.
    """
    front_x = ev.x + 0.5 * wheelbase * math.cos(ev.heading)
    front_y = ev.y + 0.5 * wheelbase * math.sin(ev.heading)
    path_heading = math.atan(path.slope_at(front_x))
    cross_track = (path.y_at(front_x) - front_y) * math.cos(path_heading)
    heading_error = math.atan2(
        math.sin(path_heading - ev.heading), math.cos(path_heading - ev.heading)
    )
    delta = heading_error + math.atan2(gains.gain * cross_track, ev.vx + gains.soft_speed)
    return min(max(delta, -steer_max), steer_max)


def pid_steer(
    ev: VehicleState,
    target_lane_center: float,
    gains: PidGains = PidGains(),
    steer_max: float = 0.6,
) -> float:
    """
    PD steering on the lateral offset to a lane centre plus a heading term.

    The lateral rate is speed * sin(heading), excluding steering slip.
    """
    error = target_lane_center - ev.y
    lateral_rate = math.hypot(ev.vx, ev.vy) * math.sin(ev.heading)
    delta = gains.kp * error - gains.kd * lateral_rate - gains.kh * ev.heading
    return min(max(delta, -steer_max), steer_max)


@dataclass(frozen=True)
class ControllerConfig:
    """Settings of the action-to-controls pipeline."""

    space: ActionSpace = field(default_factory=ActionSpace)
    horizon: int = 30
    min_path_length: float = 1.0
    stanley: StanleyGains = field(default_factory=StanleyGains)
    pid: PidGains = field(default_factory=PidGains)
    lateral: str = "stanley"

    def __post_init__(self):
        if self.lateral not in LATERAL_CONTROLLERS:
            raise ConfigError(
                f"Unknown lateral controller '{self.lateral}'. "
                f"Supported: {', '.join(LATERAL_CONTROLLERS)}"
            )
        if self.horizon < 1:
            raise ConfigError("action.horizon must be >= 1")


@dataclass
class ControlCommand:
    """Controls for one step plus what produced them."""

    controls: EgoControls
    executed: DiscreteOption
    masked: bool
    path: Optional[GuidingPath] = None


class HybridController:
    """Turns hybrid actions into steering and acceleration commands."""

    def __init__(self, config: ControllerConfig, road: RoadSpec):
        self.config = config
        self.road = road

    def command(self, ev: VehicleState, action: HybridAction) -> ControlCommand:
        space = self.config.space
        executed, masked = resolve_option(action.option, ev.lane_id, self.road.lane_count)
        accel = min(max(action.accel, -space.brake_max), space.accel_max)
        if self.config.lateral == "pid":
            target = self.road.lane_center(self.road.lane_of(ev.y)) - executed.offset(
                self.road.lane_width
            )
            steer = pid_steer(ev, target, self.config.pid, space.steer_max)
            return ControlCommand(EgoControls(steer, accel), executed, masked)

        low, high = path_length_bounds(
            ev.vx,
            self.road.lane_width,
            space.min_turn_radius,
            space.brake_max,
            space.max_path_length,
        )
        length = min(max(action.length, float(low)), float(high))
        length = max(length, self.config.min_path_length)
        path = build_path(ev, executed, length, self.road, self.config.horizon, self.config.min_path_length)
        steer = stanley_steer(ev, path, self.config.stanley, space.steer_max, space.wheelbase)
        return ControlCommand(EgoControls(steer, accel), executed, masked, path)
