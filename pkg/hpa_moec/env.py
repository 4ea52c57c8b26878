"""
Multi-lane highway microsimulation.

The road is a straight ring of ``RoadSpec.length`` metres: surrounding vehicles
(SVs) that leave the stretch ahead of or behind the ego vehicle (EV) re-enter at
the other end, so density stays stationary while the EV drives on. Lateral
coordinate ``y`` grows to the left of travel and lane 0 is the rightmost lane.

SVs follow IDM longitudinally and MOBIL for lane choice; the EV follows a
kinematic bicycle model driven by ``EgoControls``.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import ConfigError, SimulationFault

logger = logging.getLogger(__name__)

N_SLOTS = 6
EV_FEATURES = 6
SV_FEATURES = 6
OBS_DIM = EV_FEATURES + N_SLOTS * SV_FEATURES
SLOT_NAMES = (
    "current_lead",
    "current_follow",
    "left_lead",
    "left_follow",
    "right_lead",
    "right_follow",
)
TRAJECTORY_COLUMNS = (
    "step",
    "id",
    "lane_id",
    "x",
    "y",
    "phi",
    "v_x",
    "v_y",
    "delta",
    "acc",
    "f_unsafe",
)
EGO_ID = 0


@dataclass(frozen=True)
class RoadSpec:
    """Straight multi-lane road geometry."""

    lane_count: int = 3
    lane_width: float = 4.0
    length: float = 1000.0

    def __post_init__(self):
        if self.lane_count < 2:
            raise ConfigError(f"env.lane_count must be >= 2, got {self.lane_count}")
        if self.lane_width <= 0:
            raise ConfigError(f"env.lane_width must be > 0, got {self.lane_width}")
        if self.length <= 0:
            raise ConfigError(f"env.road_length must be > 0, got {self.length}")

    @property
    def width(self) -> float:
        return self.lane_count * self.lane_width

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def lane_of(self, y: float) -> int:
        lane = int(math.floor(y / self.lane_width))
        return min(max(lane, 0), self.lane_count - 1)

    def lanes_between(self, y_low: float, y_high: float) -> Tuple[int, ...]:
        """Lanes whose lateral extent overlaps [y_low, y_high]."""
        if y_high < 0 or y_low > self.width:
            return ()
        return tuple(range(self.lane_of(y_low), self.lane_of(y_high) + 1))

    def wrap(self, dx: float) -> float:
        """Signed ring distance in [-length/2, length/2)."""
        half = 0.5 * self.length
        return (dx + half) % self.length - half

    def ring(self, x: float) -> float:
        return x % self.length


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters."""

    speed_range: Tuple[float, float] = (8.0, 14.0)
    time_headway: float = 1.5
    min_gap: float = 2.0
    accel: float = 1.5
    decel: float = 2.0
    exponent: float = 4.0

    def __post_init__(self):
        low, high = self.speed_range
        if not 0 < low <= high:
            raise ConfigError(f"idm speed range must satisfy 0 < min <= max, got {self.speed_range}")
        if min(self.time_headway, self.min_gap, self.accel, self.decel) <= 0:
            raise ConfigError("idm.time_headway, min_gap, accel and decel must be > 0")

    def acceleration(
        self,
        speed: float,
        desired_speed: float,
        gap: Optional[float] = None,
        leader_speed: float = 0.0,
    ) -> float:
        """
        IDM acceleration for a vehicle with an optional leader.

        Args:
            speed: Own speed (m/s)
            desired_speed: Free-road target speed (m/s)
            gap: Bumper-to-bumper distance to the leader, None on a free road
            leader_speed: Leader speed (m/s)

        Returns:
            Acceleration in m/s^2
        """
        speed = max(speed, 0.0)
        free = self.accel * (1.0 - (speed / desired_speed) ** self.exponent)
        if gap is None:
            return free
        approach = speed * (speed - leader_speed) / (2.0 * math.sqrt(self.accel * self.decel))
        desired_gap = self.min_gap + max(0.0, speed * self.time_headway + approach)
        return free - self.accel * (desired_gap / max(gap, 1e-3)) ** 2


@dataclass(frozen=True)
class MobilParams:
    """MOBIL lane-change parameters."""

    politeness: float = 0.3
    threshold: float = 0.2
    safe_decel: float = 3.0
    decision_period: float = 1.0
    lane_change_time: float = 3.0

    def __post_init__(self):
        if self.decision_period <= 0 or self.lane_change_time <= 0:
            raise ConfigError("mobil.decision_period and lane_change_time must be > 0")


@dataclass(frozen=True)
class EnvConfig:
    """Simulator settings shared by the generated and the replayed highway."""

    road: RoadSpec = field(default_factory=RoadSpec)
    dt: float = 0.1
    episode_seconds: float = 200.0
    density: float = 0.5
    capacity_per_lane_km: float = 50.0 / 3.0
    wheelbase: float = 2.7
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    steer_max: float = 0.6
    accel_max: float = 3.0
    brake_max: float = 3.0
    observe_behind: float = 80.0
    observe_ahead: float = 160.0
    ego_speed_range: Tuple[float, float] = (8.0, 12.0)
    spawn_attempts: int = 200
    spawn_headway: float = 0.5
    ego_in_traffic: bool = True
    mobil_enabled: bool = True

    def __post_init__(self):
        if self.dt <= 0 or self.episode_seconds <= 0:
            raise ConfigError("env.dt and env.episode_seconds must be > 0")
        if not 0.0 <= self.density < 1.0:
            raise ConfigError(f"env.density must be in [0, 1), got {self.density}")
        if self.steer_max <= 0 or self.accel_max <= 0 or self.brake_max <= 0:
            raise ConfigError("env.steer_max, accel_max and brake_max must be > 0")

    @property
    def max_steps(self) -> int:
        return int(round(self.episode_seconds / self.dt))

    def vehicle_count(self, density: float) -> int:
        """Number of SVs for a V/C ratio; the EV takes one slot."""
        total = density * self.capacity_per_lane_km * self.road.lane_count
        total *= self.road.length / 1000.0
        return max(0, int(round(total)) - 1)


@dataclass
class VehicleState:
    """Kinematic ground truth of one vehicle in the road frame."""

    vehicle_id: int
    lane_id: int
    x: float
    y: float
    heading: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    length: float = 5.0
    width: float = 2.0

    def corners(self, dx: Optional[float] = None) -> np.ndarray:
        """Rectangle corners, optionally placed at longitudinal offset ``dx``."""
        cx = self.x if dx is None else dx
        return rectangle_corners(cx, self.y, self.heading, self.length, self.width)


@dataclass
class EgoVehicle(VehicleState):
    """Agent-controlled vehicle; ``speed`` is the bicycle-model speed state."""

    speed: float = 0.0
    steer: float = 0.0
    accel: float = 0.0


@dataclass
class TrafficVehicle(VehicleState):
    """IDM/MOBIL-driven surrounding vehicle."""

    desired_speed: float = 12.0
    target_lane: int = -1
    accel: float = 0.0
    next_decision: float = 0.0

    @property
    def changing_lane(self) -> bool:
        return self.target_lane >= 0


@dataclass(frozen=True)
class EgoControls:
    """Steering angle (rad) and longitudinal acceleration (m/s^2)."""

    steer: float = 0.0
    accel: float = 0.0


@dataclass
class EgoObservation:
    """The 42-feature agent observation: EV block plus six SV slots."""

    ev: np.ndarray
    svs: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.ev, self.svs.ravel()])

    @property
    def present(self) -> np.ndarray:
        return self.svs[:, 0] > 0.5

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "EgoObservation":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (OBS_DIM,):
            raise ConfigError(f"Observation must have {OBS_DIM} entries, got {vector.shape}")
        return cls(vector[:EV_FEATURES].copy(), vector[EV_FEATURES:].reshape(N_SLOTS, SV_FEATURES).copy())


@dataclass
class StepOutcome:
    """Result of one simulator step."""

    observation: EgoObservation
    f_unsafe: bool
    collision: bool
    off_road: bool
    elapsed: float
    truncated: bool = False
    applied: EgoControls = field(default_factory=EgoControls)
    sv_accels: np.ndarray = field(default_factory=lambda: np.zeros(N_SLOTS))

    @property
    def done(self) -> bool:
        return self.f_unsafe or self.truncated


# Feature scales applied before observations enter a network.
STATE_SCALE = np.concatenate(
    [
        np.array([3.0, 1000.0, 12.0, 1.0, 20.0, 5.0]),
        np.tile(np.array([1.0, 100.0, 10.0, 1.0, 10.0, 5.0]), N_SLOTS),
    ]
)


def rectangle_corners(
    x: float, y: float, heading: float, length: float, width: float
) -> np.ndarray:
    """Corners of an oriented rectangle centred at (x, y), shape (4, 2)."""
    c, s = math.cos(heading), math.sin(heading)
    half = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [0.5 * length, 0.5 * width]
    rotation = np.array([[c, -s], [s, c]])
    return half @ rotation.T + [x, y]


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals."""
    for poly in (a, b):
        for k in range(4):
            edge = poly[(k + 1) % 4] - poly[k]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def vehicles_collide(a: VehicleState, b: VehicleState, road: RoadSpec) -> bool:
    """Oriented-rectangle overlap of two vehicles on the ring road."""
    dx = road.wrap(b.x - a.x)
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if abs(dx) > reach or abs(b.y - a.y) > reach:
        return False
    return rectangles_overlap(a.corners(0.0), b.corners(dx))


def select_neighbours(
    ego: VehicleState,
    others: Sequence[VehicleState],
    road: RoadSpec,
    behind: float = 80.0,
    ahead: float = 160.0,
) -> List[Optional[VehicleState]]:
    """
    Pick the leader and follower in the current, left and right lanes.

    Candidates outside [-behind, ahead] are ignored; within a slot the vehicle
    nearest by |dx| wins and ties keep the earlier vehicle.

    Returns:
        Six entries in ``SLOT_NAMES`` order, None where a slot is empty
    """
    lane = ego.lane_id
    lanes = (lane, lane + 1, lane - 1)
    slots: List[Optional[VehicleState]] = [None] * N_SLOTS
    best = [math.inf] * N_SLOTS
    for vehicle in others:
        dx = road.wrap(vehicle.x - ego.x)
        if dx < -behind or dx > ahead:
            continue
        for k, slot_lane in enumerate(lanes):
            if vehicle.lane_id != slot_lane:
                continue
            slot = 2 * k if dx > 0 else 2 * k + 1
            if abs(dx) < best[slot]:
                best[slot] = abs(dx)
                slots[slot] = vehicle
    return slots


def build_observation(
    ego: VehicleState, slots: Sequence[Optional[VehicleState]], road: RoadSpec
) -> EgoObservation:
    ev = np.array([ego.lane_id, road.ring(ego.x), ego.y, ego.heading, ego.vx, ego.vy])
    svs = np.zeros((N_SLOTS, SV_FEATURES))
    for k, vehicle in enumerate(slots):
        if vehicle is None:
            continue
        svs[k] = (
            1.0,
            road.wrap(vehicle.x - ego.x),
            vehicle.y - ego.y,
            vehicle.heading,
            vehicle.vx - ego.vx,
            vehicle.vy - ego.vy,
        )
    return EgoObservation(ev, svs)


def bicycle_step(
    ego: EgoVehicle, steer: float, accel: float, dt: float, wheelbase: float
) -> None:
    """Advance the EV with the centre-of-gravity kinematic bicycle model."""
    slip = math.atan(0.5 * math.tan(steer))
    direction = ego.heading + slip
    ego.x += ego.speed * math.cos(direction) * dt
    ego.y += ego.speed * math.sin(direction) * dt
    heading = ego.heading + ego.speed / (0.5 * wheelbase) * math.sin(slip) * dt
    ego.heading = math.atan2(math.sin(heading), math.cos(heading))
    ego.speed = max(0.0, ego.speed + accel * dt)
    ego.steer = steer
    ego.accel = accel
    direction = ego.heading + slip
    ego.vx = ego.speed * math.cos(direction)
    ego.vy = ego.speed * math.sin(direction)


def ballistic_step(speed: float, accel: float, dt: float) -> Tuple[float, float]:
    """Distance travelled and new speed under constant acceleration, stopping at 0."""
    new_speed = speed + accel * dt
    if new_speed < 0.0:
        return (-speed * speed / (2.0 * accel) if accel < 0 else 0.0), 0.0
    return speed * dt + 0.5 * accel * dt * dt, new_speed


class TrajectoryLog:
    """Per-step, per-vehicle trajectory rows with a fixed column order."""

    COLUMNS = TRAJECTORY_COLUMNS

    def __init__(self):
        self.rows: List[tuple] = []

    def record(
        self,
        step: int,
        vehicle: VehicleState,
        steer: float,
        accel: float,
        f_unsafe: bool,
    ) -> None:
        self.rows.append(
            (
                step,
                vehicle.vehicle_id,
                vehicle.lane_id,
                vehicle.x,
                vehicle.y,
                vehicle.heading,
                vehicle.vx,
                vehicle.vy,
                steer,
                accel,
                int(f_unsafe),
            )
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.COLUMNS))

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        logger.debug(f"Wrote {len(self.rows)} trajectory rows to {path}")
        return path


class HighwayBase:
    """
    Shared EV dynamics, observation, collision and episode bookkeeping.

    Subclasses provide the surrounding traffic through ``others`` and
    ``_advance_traffic``.
    """

    def __init__(self, config: EnvConfig, trajectory_log: Optional[TrajectoryLog] = None):
        self.config = config
        self.road = config.road
        self.trajectory_log = trajectory_log
        self.ego: Optional[EgoVehicle] = None
        self.steps = 0
        self.time = 0.0
        self._slots: Optional[List[Optional[VehicleState]]] = None

    @property
    def max_steps(self) -> int:
        return self.config.max_steps

    def others(self) -> Sequence[VehicleState]:
        raise NotImplementedError

    def _advance_traffic(self, dt: float) -> None:
        raise NotImplementedError

    def _recording_finished(self) -> bool:
        return False

    def _require_ego(self) -> EgoVehicle:
        if self.ego is None:
            raise SimulationFault("Environment used before reset()")
        return self.ego

    def neighbours(self) -> List[Optional[VehicleState]]:
        if self._slots is None:
            self._slots = select_neighbours(
                self._require_ego(),
                self.others(),
                self.road,
                self.config.observe_behind,
                self.config.observe_ahead,
            )
        return self._slots

    def observe(self) -> EgoObservation:
        """Current 42-feature observation of the EV."""
        return build_observation(self._require_ego(), self.neighbours(), self.road)

    def sv_accelerations(self) -> np.ndarray:
        """Last-step longitudinal accelerations of the observed SVs, 0 when absent."""
        return np.array(
            [0.0 if v is None else float(getattr(v, "accel", 0.0)) for v in self.neighbours()]
        )

    def ttc_to_leader(self, t_max: float) -> float:
        """
        Time to collision with the same-lane leader at constant speeds.

        Returns:
            gap/closing speed clamped to [0, t_max]; t_max without a closing leader
        """
        ego = self._require_ego()
        leader = self.neighbours()[0]
        if leader is None:
            return t_max
        closing = ego.vx - leader.vx
        if closing <= 0:
            return t_max
        gap = self.road.wrap(leader.x - ego.x) - 0.5 * (ego.length + leader.length)
        return float(min(max(gap / closing, 0.0), t_max))

    def check_collision(self) -> bool:
        ego = self._require_ego()
        return any(vehicles_collide(ego, other, self.road) for other in self.others())

    def is_off_road(self) -> bool:
        ego = self._require_ego()
        return ego.y < 0.0 or ego.y > self.road.width

    def state_dump(self) -> Dict[str, object]:
        return {
            "time": self.time,
            "steps": self.steps,
            "ego": None if self.ego is None else asdict(self.ego),
            "vehicles": len(self.others()) if self.ego is not None else 0,
        }

    def step(self, controls: EgoControls, dt: Optional[float] = None) -> StepOutcome:
        """
        Advance the EV and the traffic by one control step.

        Args:
            controls: Steering and acceleration; clamped to the vehicle limits
            dt: Step length, defaults to ``config.dt``

        Returns:
            The outcome with the next observation and termination flags

        Raises:
            SimulationFault: On non-finite controls or stepping a finished episode
        """
        ego = self._require_ego()
        dt = self.config.dt if dt is None else float(dt)
        steer, accel = float(controls.steer), float(controls.accel)
        if not (math.isfinite(steer) and math.isfinite(accel) and math.isfinite(dt) and dt > 0):
            logger.error(f"Non-finite controls steer={steer} accel={accel} dt={dt}")
            raise SimulationFault(
                f"Non-finite controls steer={steer} accel={accel} dt={dt}",
                state=self.state_dump(),
            )
        if self.steps >= self.max_steps:
            raise SimulationFault(
                f"Episode cap of {self.config.episode_seconds} s reached; call reset()",
                state=self.state_dump(),
            )
        steer = min(max(steer, -self.config.steer_max), self.config.steer_max)
        accel = min(max(accel, -self.config.brake_max), self.config.accel_max)

        bicycle_step(ego, steer, accel, dt, self.config.wheelbase)
        ego.lane_id = self.road.lane_of(ego.y)
        self._advance_traffic(dt)
        self.steps += 1
        self.time = self.steps * dt
        self._slots = None

        collision = self.check_collision()
        off_road = self.is_off_road()
        f_unsafe = collision or off_road
        truncated = not f_unsafe and (
            self.steps >= self.max_steps or self._recording_finished()
        )
        if self.trajectory_log is not None:
            self.trajectory_log.record(self.steps, ego, steer, accel, f_unsafe)
            for other in self.others():
                self.trajectory_log.record(
                    self.steps, other, 0.0, float(getattr(other, "accel", 0.0)), False
                )
        return StepOutcome(
            observation=self.observe(),
            f_unsafe=f_unsafe,
            collision=collision,
            off_road=off_road,
            elapsed=self.time,
            truncated=truncated,
            applied=EgoControls(steer, accel),
            sv_accels=self.sv_accelerations(),
        )


class Highway(HighwayBase):
    """Generated ring-road traffic with IDM/MOBIL surrounding vehicles."""

    def __init__(
        self,
        config: Optional[EnvConfig] = None,
        idm: Optional[IdmParams] = None,
        mobil: Optional[MobilParams] = None,
        trajectory_log: Optional[TrajectoryLog] = None,
    ):
        super().__init__(config or EnvConfig(), trajectory_log)
        self.idm = idm or IdmParams()
        self.mobil = mobil or MobilParams()
        self.vehicles: List[TrafficVehicle] = []
        self.sv_collision_count = 0
        self.rng = np.random.default_rng()

    def others(self) -> Sequence[VehicleState]:
        return self.vehicles

    def reset(self, seed: Optional[int] = None, density: Optional[float] = None) -> EgoObservation:
        """
        Place the EV and SVs for a new episode.

        Args:
            seed: Layout seed; the same seed gives the same layout
            density: V/C ratio in [0, 1), defaults to ``config.density``

        Returns:
            The initial observation

        Raises:
            ConfigError: If the density is invalid or placement keeps failing
        """
        density = self.config.density if density is None else float(density)
        if not 0.0 <= density < 1.0:
            raise ConfigError(f"Traffic density must be in [0, 1), got {density}")
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.time = 0.0
        self.sv_collision_count = 0
        self._slots = None

        lane = int(self.rng.integers(self.road.lane_count))
        speed = float(self.rng.uniform(*self.config.ego_speed_range))
        self.ego = EgoVehicle(
            EGO_ID,
            lane,
            0.0,
            self.road.lane_center(lane),
            vx=speed,
            length=self.config.vehicle_length,
            width=self.config.vehicle_width,
            speed=speed,
        )
        self.vehicles = []
        count = self.config.vehicle_count(density)
        for vehicle_id in range(1, count + 1):
            self._spawn(vehicle_id, density)
        logger.debug(f"Reset highway seed={seed} density={density} with {count} SVs")
        return self.observe()

    def add_vehicle(
        self,
        lane: int,
        x: float,
        speed: float,
        desired_speed: Optional[float] = None,
    ) -> TrafficVehicle:
        """Place one SV by hand (scenario construction)."""
        self._require_ego()
        vehicle = TrafficVehicle(
            len(self.vehicles) + 1,
            lane,
            self.road.ring(x),
            self.road.lane_center(lane),
            vx=speed,
            length=self.config.vehicle_length,
            width=self.config.vehicle_width,
            desired_speed=speed if desired_speed is None else desired_speed,
        )
        self.vehicles.append(vehicle)
        self._slots = None
        return vehicle

    def _spawn(self, vehicle_id: int, density: float) -> None:
        for _ in range(self.config.spawn_attempts):
            lane = int(self.rng.integers(self.road.lane_count))
            x = float(self.rng.uniform(0.0, self.road.length))
            desired = float(self.rng.uniform(*self.idm.speed_range))
            speed = desired * float(self.rng.uniform(0.7, 1.0))
            if self._placement_clear(lane, x, speed):
                self.vehicles.append(
                    TrafficVehicle(
                        vehicle_id,
                        lane,
                        x,
                        self.road.lane_center(lane),
                        vx=speed,
                        length=self.config.vehicle_length,
                        width=self.config.vehicle_width,
                        desired_speed=desired,
                        next_decision=float(self.rng.uniform(0.0, self.mobil.decision_period)),
                    )
                )
                return
        raise ConfigError(
            f"Could not place vehicle {vehicle_id} after "
            f"{self.config.spawn_attempts} attempts at density {density}; "
            f"lower env.density"
        )

    def _placement_clear(self, lane: int, x: float, speed: float) -> bool:
        occupants: List[VehicleState] = [v for v in self.vehicles if v.lane_id == lane]
        if self.ego is not None and self.ego.lane_id == lane:
            occupants.append(self.ego)
        for other in occupants:
            gap = abs(self.road.wrap(other.x - x)) - 0.5 * (other.length + self.config.vehicle_length)
            needed = self.idm.min_gap + self.config.spawn_headway * max(speed, other.vx)
            if gap < needed:
                return False
        return True

    # -- traffic model -------------------------------------------------

    def _lanes_of(self, vehicle: VehicleState) -> Tuple[int, ...]:
        lanes = set(self.road.lanes_between(vehicle.y - 0.5 * vehicle.width, vehicle.y + 0.5 * vehicle.width))
        if isinstance(vehicle, TrafficVehicle) and vehicle.changing_lane:
            lanes.add(vehicle.target_lane)
        lanes.add(vehicle.lane_id)
        return tuple(sorted(lanes))

    def _lane_index(self) -> Dict[int, List[VehicleState]]:
        index: Dict[int, List[VehicleState]] = {lane: [] for lane in range(self.road.lane_count)}
        members: List[VehicleState] = list(self.vehicles)
        if self.config.ego_in_traffic and self.ego is not None:
            members.append(self.ego)
        for vehicle in members:
            for lane in self._lanes_of(vehicle):
                if 0 <= lane < self.road.lane_count:
                    index[lane].append(vehicle)
        return index

    def _gap(self, follower: VehicleState, leader: VehicleState) -> float:
        ahead = (leader.x - follower.x) % self.road.length
        return ahead - 0.5 * (leader.length + follower.length)

    def _leader(
        self, vehicle: VehicleState, lanes: Sequence[int], index: Dict[int, List[VehicleState]]
    ) -> Tuple[Optional[VehicleState], Optional[float]]:
        best, best_ahead = None, math.inf
        for lane in lanes:
            for other in index.get(lane, ()):
                if other is vehicle:
                    continue
                ahead = (other.x - vehicle.x) % self.road.length
                if ahead < best_ahead:
                    best, best_ahead = other, ahead
        if best is None:
            return None, None
        return best, self._gap(vehicle, best)

    def _follower(
        self, vehicle: VehicleState, lanes: Sequence[int], index: Dict[int, List[VehicleState]]
    ) -> Tuple[Optional[VehicleState], Optional[float]]:
        best, best_behind = None, math.inf
        for lane in lanes:
            for other in index.get(lane, ()):
                if other is vehicle:
                    continue
                behind = (vehicle.x - other.x) % self.road.length
                if behind < best_behind:
                    best, best_behind = other, behind
        if best is None:
            return None, None
        return best, self._gap(best, vehicle)

    def _desired_speed(self, vehicle: VehicleState) -> float:
        return getattr(vehicle, "desired_speed", self.idm.speed_range[1])

    def _idm(self, vehicle: VehicleState, leader: Optional[VehicleState], gap: Optional[float]) -> float:
        if leader is None:
            return self.idm.acceleration(vehicle.vx, self._desired_speed(vehicle))
        return self.idm.acceleration(vehicle.vx, self._desired_speed(vehicle), gap, leader.vx)

    def _idm_behind(self, follower: VehicleState, leader: Optional[VehicleState]) -> float:
        """IDM of ``follower`` behind ``leader``; a lone vehicle on the ring follows nobody."""
        if leader is None or leader is follower:
            return self._idm(follower, None, None)
        return self._idm(follower, leader, self._gap(follower, leader))

    def _mobil_gain(
        self, vehicle: TrafficVehicle, lane: int, index: Dict[int, List[VehicleState]]
    ) -> Optional[float]:
        new_leader, new_gap = self._leader(vehicle, (lane,), index)
        new_follower, back_gap = self._follower(vehicle, (lane,), index)
        min_gap = self.idm.min_gap
        if (new_gap is not None and new_gap < min_gap) or (back_gap is not None and back_gap < min_gap):
            return None

        self_after = self._idm(vehicle, new_leader, new_gap)
        if self_after < -self.mobil.safe_decel:
            return None
        follower_change = 0.0
        if new_follower is not None:
            after = self._idm(new_follower, vehicle, back_gap)
            if after < -self.mobil.safe_decel:
                return None
            before = self._idm_behind(new_follower, new_leader)
            follower_change += after - before

        old_leader, old_gap = self._leader(vehicle, (vehicle.lane_id,), index)
        self_before = self._idm(vehicle, old_leader, old_gap)
        old_follower, old_back_gap = self._follower(vehicle, (vehicle.lane_id,), index)
        if old_follower is not None:
            before = self._idm(old_follower, vehicle, old_back_gap)
            after = self._idm_behind(old_follower, old_leader)
            follower_change += after - before
        return self_after - self_before + self.mobil.politeness * follower_change

    def _decide_lanes(self, index: Dict[int, List[VehicleState]]) -> None:
        for vehicle in self.vehicles:
            if vehicle.changing_lane or self.time < vehicle.next_decision:
                continue
            vehicle.next_decision += self.mobil.decision_period
            best_lane, best_gain = None, self.mobil.threshold
            for lane in (vehicle.lane_id + 1, vehicle.lane_id - 1):
                if not 0 <= lane < self.road.lane_count:
                    continue
                gain = self._mobil_gain(vehicle, lane, index)
                if gain is not None and gain > best_gain:
                    best_lane, best_gain = lane, gain
            if best_lane is not None:
                vehicle.target_lane = best_lane
                index[best_lane].append(vehicle)
                logger.debug(
                    f"SV {vehicle.vehicle_id} changes lane {vehicle.lane_id}->{best_lane} "
                    f"(gain {best_gain:.3f})"
                )

    def _advance_traffic(self, dt: float) -> None:
        index = self._lane_index()
        if self.config.mobil_enabled:
            self._decide_lanes(index)
        accels = []
        for vehicle in self.vehicles:
            leader, gap = self._leader(vehicle, self._lanes_of(vehicle), index)
            accels.append(self._idm(vehicle, leader, gap))

        lateral_speed = self.road.lane_width / self.mobil.lane_change_time
        for vehicle, accel in zip(self.vehicles, accels):
            distance, speed = ballistic_step(vehicle.vx, accel, dt)
            vehicle.x = self.road.ring(vehicle.x + distance)
            vehicle.accel = (speed - vehicle.vx) / dt
            vehicle.vx = speed
            if vehicle.changing_lane:
                offset = self.road.lane_center(vehicle.target_lane) - vehicle.y
                if abs(offset) <= lateral_speed * dt:
                    vehicle.y += offset
                    vehicle.vy = 0.0
                    vehicle.target_lane = -1
                else:
                    vehicle.vy = math.copysign(lateral_speed, offset)
                    vehicle.y += vehicle.vy * dt
            vehicle.lane_id = self.road.lane_of(vehicle.y)
            vehicle.heading = math.atan2(vehicle.vy, vehicle.vx) if vehicle.vx > 0 else 0.0
        self.sv_collision_count += len(self._sv_collisions())

    def _sv_collisions(self) -> Set[Tuple[int, int]]:
        pairs: Set[Tuple[int, int]] = set()
        index: Dict[int, List[TrafficVehicle]] = {}
        for vehicle in self.vehicles:
            for lane in self._lanes_of(vehicle):
                index.setdefault(lane, []).append(vehicle)
        for members in index.values():
            if len(members) < 2:
                continue
            members.sort(key=lambda v: v.x)
            for k, vehicle in enumerate(members):
                other = members[(k + 1) % len(members)]
                if other is vehicle:
                    continue
                if vehicles_collide(vehicle, other, self.road):
                    pairs.add(tuple(sorted((vehicle.vehicle_id, other.vehicle_id))))
        if pairs:
            logger.warning(f"SV collisions at t={self.time:.1f}s: {sorted(pairs)}")
        return pairs
