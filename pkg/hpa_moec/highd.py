"""
HighD-format recordings: parsing, direction normalisation, open-loop replay
and synthetic fixtures.

Tracks files carry one row per vehicle and frame with the bounding box
top-left corner in image coordinates (y grows downward). Vehicles on the
lower lanes drive toward +x, vehicles on the upper lanes toward -x. Replay
mirrors the chosen direction into the simulator road frame, where lane 0 is
the rightmost lane and y grows to the left.
"""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .env import EgoObservation, EgoVehicle, EnvConfig, HighwayBase, RoadSpec, TrafficVehicle, TrajectoryLog, VehicleState
from .exceptions import ConfigError, DataError, SchemaError, SelectionError, SimulationFault
from .reward import RewardConfig
from .rollout import EpisodeMetrics, EpisodeRecord, Policy, episode_metrics, run_episode
from .utils import read_key_values, require_keys, write_key_values

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("frame", "id", "x", "y", "width", "height", "xVelocity", "yVelocity", "laneId")
META_KEYS = ("frameRate", "lowerLaneMarkings", "upperLaneMarkings")
TRACKS_SUFFIX = "_tracks.csv"
META_SUFFIX = "_recordingMeta.txt"
LOWER, UPPER = 1, -1
# Replay roads are long enough that nothing wraps.
REPLAY_ROAD_LENGTH = 1.0e7
SCENARIOS = ("constant", "platoon", "cut_in", "free_flow", "stopped_leader")
FIXTURE_EDGE = 2.0
FIXTURE_MEDIAN = 1.0
FIXTURE_X_REFERENCE = 420.0
STOPPED_LEADER_GAP = 20.0
SNAP_TOLERANCE = 1e-9


@dataclass
class Track:
    """
    One vehicle resampled onto the global time grid ``frames * dt``.

    Positions are bounding-box centres; ``length`` is the extent along x.
    """

    vehicle_id: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    lane_ids: np.ndarray
    length: float
    width: float
    dt: float

    @property
    def start(self) -> int:
        return int(self.frames[0])

    @property
    def end(self) -> int:
        return int(self.frames[-1])

    @property
    def duration(self) -> float:
        return (len(self.frames) - 1) * self.dt

    def index_at(self, frame: int) -> Optional[int]:
        if frame < self.start or frame > self.end:
            return None
        return frame - self.start


@dataclass(frozen=True)
class RecordingMeta:
    """Frame rate and lane marking offsets (image y, metres) of a recording."""

    frame_rate: float
    lower_lane_markings: Tuple[float, ...]
    upper_lane_markings: Tuple[float, ...]

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise DataError(f"frameRate must be > 0, got {self.frame_rate}")
        for name, markings in (("lower", self.lower_lane_markings), ("upper", self.upper_lane_markings)):
            if list(markings) != sorted(markings):
                raise DataError(f"{name} lane markings are not sorted: {markings}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RecordingMeta":
        """
        Read a ``key=value`` recording meta file.

        Raises:
            SchemaError: If a required key is missing
            DataError: If the file is absent or a value does not parse
        """
        try:
            values = read_key_values(path)
        except ConfigError as e:
            raise DataError(str(e))
        require_keys(values, META_KEYS, f"Recording meta {path}", error=SchemaError)
        try:
            return cls(
                float(values["frameRate"]),
                _parse_markings(values["lowerLaneMarkings"]),
                _parse_markings(values["upperLaneMarkings"]),
            )
        except ValueError as e:
            raise DataError(f"Malformed recording meta {path}: {e}")

    def save(self, path: Union[str, Path]) -> Path:
        return write_key_values(
            path,
            {
                "frameRate": self.frame_rate,
                "lowerLaneMarkings": ";".join(repr(float(m)) for m in self.lower_lane_markings),
                "upperLaneMarkings": ";".join(repr(float(m)) for m in self.upper_lane_markings),
            },
        )

    def markings(self, direction: int) -> Tuple[float, ...]:
        return self.lower_lane_markings if direction == LOWER else self.upper_lane_markings

    def lane_count(self, direction: int) -> int:
        return max(len(self.markings(direction)) - 1, 0)

    def lane_width(self, direction: int) -> float:
        return float(np.mean(np.diff(self.markings(direction))))


def _parse_markings(text: str) -> Tuple[float, ...]:
    return tuple(float(item) for item in text.split(";") if item.strip())


def highd_lane_id(lane: int, direction: int, meta: RecordingMeta) -> int:
    """HighD laneId of a road-frame lane index; ids count top to bottom from 2."""
    upper = meta.lane_count(UPPER)
    if direction == UPPER:
        return 2 + lane
    return upper + 3 + (meta.lane_count(LOWER) - 1 - lane)


def road_lane(lane_id: int, direction: int, meta: RecordingMeta) -> int:
    """Road-frame lane index of a HighD laneId."""
    upper = meta.lane_count(UPPER)
    if direction == UPPER:
        return lane_id - 2
    return meta.lane_count(LOWER) - 1 - (lane_id - upper - 3)


def _resample(
    vehicle_id: int, rows: pd.DataFrame, frame_rate: float, dt: float
) -> Optional[Track]:
    frames = rows["frame"].to_numpy(dtype=float)
    first = math.ceil(frames[0] / frame_rate / dt - SNAP_TOLERANCE)
    last = math.floor(frames[-1] / frame_rate / dt + SNAP_TOLERANCE)
    if last < first:
        logger.debug(f"Vehicle {vehicle_id} is shorter than one step; skipped")
        return None
    grid = np.arange(first, last + 1)
    positions = grid * (dt * frame_rate)
    snapped = np.round(positions)
    positions = np.where(np.abs(positions - snapped) < SNAP_TOLERANCE, snapped, positions)
    positions = np.clip(positions, frames[0], frames[-1])

    length = float(rows["width"].median())
    width = float(rows["height"].median())
    cx = rows["x"].to_numpy(dtype=float) + 0.5 * rows["width"].to_numpy(dtype=float)
    cy = rows["y"].to_numpy(dtype=float) + 0.5 * rows["height"].to_numpy(dtype=float)
    previous = np.searchsorted(frames, positions + SNAP_TOLERANCE, side="right") - 1
    return Track(
        vehicle_id=int(vehicle_id),
        frames=grid,
        x=np.interp(positions, frames, cx),
        y=np.interp(positions, frames, cy),
        vx=np.interp(positions, frames, rows["xVelocity"].to_numpy(dtype=float)),
        vy=np.interp(positions, frames, rows["yVelocity"].to_numpy(dtype=float)),
        lane_ids=rows["laneId"].to_numpy(dtype=int)[previous],
        length=length,
        width=width,
        dt=dt,
    )


def parse_tracks(source, frame_rate: float, dt: float = 0.1) -> Dict[int, Track]:
    """
    Read a HighD tracks CSV and resample every vehicle to the simulator step.

    Extra columns are ignored. Positions and velocities are interpolated
    linearly; laneId takes the last recorded value.

    Args:
        source: Path or file-like object
        frame_rate: Recording frame rate (Hz)
        dt: Simulator step (s)

    Returns:
        Tracks keyed by vehicle id

    Raises:
        SchemaError: If a required column is missing
        DataError: If a vehicle's frames do not increase or values are not finite
    """
    try:
        frame = pd.read_csv(source)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"Tracks file has no header: {source}")
    for column in REQUIRED_COLUMNS:
        if column not in frame.columns:
            raise SchemaError(f"Tracks file is missing column '{column}'")
    if frame.empty:
        return {}

    numeric = frame[list(REQUIRED_COLUMNS)].to_numpy(dtype=float)
    bad_rows = np.flatnonzero(~np.isfinite(numeric).all(axis=1))
    if bad_rows.size:
        raise DataError(f"Non-finite values in tracks row {frame.index[bad_rows[0]]}")

    tracks = {}
    for vehicle_id, rows in frame.groupby("id", sort=True):
        steps = np.diff(rows["frame"].to_numpy())
        bad = np.flatnonzero(steps <= 0)
        if bad.size:
            raise DataError(
                f"Frames of vehicle {vehicle_id} are not increasing at row {rows.index[bad[0] + 1]}"
            )
        track = _resample(vehicle_id, rows, frame_rate, dt)
        if track is not None:
            tracks[track.vehicle_id] = track
    logger.info(f"Parsed {len(tracks)} vehicles at dt={dt}")
    return tracks


def write_tracks(tracks: Iterable[Track], path: Union[str, Path]) -> Path:
    """
    Serialise tracks in the HighD column schema; the frame column is the grid index.

    The written file's frame rate is therefore ``1 / dt`` of the tracks.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = []
    for track in sorted(tracks, key=lambda t: t.vehicle_id):
        parts.append(
            pd.DataFrame(
                {
                    "frame": track.frames,
                    "id": track.vehicle_id,
                    "x": track.x - 0.5 * track.length,
                    "y": track.y - 0.5 * track.width,
                    "width": track.length,
                    "height": track.width,
                    "xVelocity": track.vx,
                    "yVelocity": track.vy,
                    "laneId": track.lane_ids,
                }
            )
        )
    frame = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=list(REQUIRED_COLUMNS))
    frame[list(REQUIRED_COLUMNS)].to_csv(path, index=False)
    return path


class Recording:
    """Parsed tracks plus meta, with canonical road-frame views per direction."""

    def __init__(self, meta: RecordingMeta, tracks: Dict[int, Track], dt: float, name: str = ""):
        self.meta = meta
        self.tracks = tracks
        self.dt = dt
        self.name = name
        self.x_reference = max((float(np.max(t.x)) + t.length for t in tracks.values()), default=0.0)
        self._canonical: Dict[int, List[Track]] = {}

    @classmethod
    def load(cls, tracks_path: Union[str, Path], meta_path: Union[str, Path], dt: float = 0.1) -> "Recording":
        meta = RecordingMeta.load(meta_path)
        tracks = parse_tracks(tracks_path, meta.frame_rate, dt)
        return cls(meta, tracks, dt, name=Path(tracks_path).name[: -len(TRACKS_SUFFIX)])

    @classmethod
    def from_directory(
        cls, directory: Union[str, Path], dt: float = 0.1, recording_id: Optional[str] = None
    ) -> "Recording":
        """
        Load ``<id>_tracks.csv`` and ``<id>_recordingMeta.txt`` from a directory.

        Raises:
            DataError: If no matching recording exists
        """
        directory = Path(directory)
        candidates = sorted(directory.glob(f"*{TRACKS_SUFFIX}"))
        if recording_id is not None:
            candidates = [p for p in candidates if p.name == f"{recording_id}{TRACKS_SUFFIX}"]
        if not candidates:
            raise DataError(f"No HighD tracks file found in {directory}")
        tracks_path = candidates[0]
        prefix = tracks_path.name[: -len(TRACKS_SUFFIX)]
        return cls.load(tracks_path, directory / f"{prefix}{META_SUFFIX}", dt)

    def direction_of(self, vehicle_id: int) -> int:
        """Driving direction from the first laneId: upper lanes come first."""
        first_lane = int(self.tracks[vehicle_id].lane_ids[0])
        return UPPER if first_lane < self.meta.lane_count(UPPER) + 2 else LOWER

    def road(self, direction: int) -> RoadSpec:
        return RoadSpec(
            self.meta.lane_count(direction), self.meta.lane_width(direction), REPLAY_ROAD_LENGTH
        )

    def _to_road_frame(self, track: Track, direction: int) -> Track:
        markings = self.meta.markings(direction)
        if direction == LOWER:
            x, y = track.x, markings[-1] - track.y
            vx, vy = track.vx, -track.vy
        else:
            x, y = self.x_reference - track.x, track.y - markings[0]
            vx, vy = -track.vx, track.vy
        lanes = np.array([road_lane(int(lane), direction, self.meta) for lane in track.lane_ids])
        return replace(track, x=x, y=y, vx=vx, vy=vy, lane_ids=lanes)

    def canonical_tracks(self, direction: int) -> List[Track]:
        """Tracks of one driving direction mirrored into the road frame."""
        if direction not in self._canonical:
            self._canonical[direction] = [
                self._to_road_frame(track, direction)
                for vehicle_id, track in self.tracks.items()
                if self.direction_of(vehicle_id) == direction
            ]
        return self._canonical[direction]

    def eligible(self, min_seconds: float) -> List[int]:
        return sorted(v for v, track in self.tracks.items() if track.duration >= min_seconds)


class ReplayHighway(HighwayBase):
    """Open-loop replay: SVs follow their recorded tracks, one vehicle is the EV."""

    def __init__(
        self,
        tracks: Sequence[Track],
        config: EnvConfig,
        trajectory_log: Optional[TrajectoryLog] = None,
    ):
        super().__init__(config, trajectory_log)
        self.tracks = {track.vehicle_id: track for track in tracks}
        self.ego_id: Optional[int] = None
        self.frame = 0
        self.end_frame = 0
        self._vehicles: List[TrafficVehicle] = []
        self._vehicles_frame: Optional[int] = None

    def reset(self, ego_id: int) -> EgoObservation:
        """
        Substitute the EV for ``ego_id`` at its first recorded state.

        Raises:
            SelectionError: If the vehicle is not part of this replay
        """
        track = self.tracks.get(ego_id)
        if track is None:
            raise SelectionError(f"Vehicle {ego_id} is not in the recording")
        self.ego_id = ego_id
        self.frame, self.end_frame = track.start, track.end
        self.steps = 0
        self.time = 0.0
        self._slots = None
        self._vehicles_frame = None
        speed = math.hypot(track.vx[0], track.vy[0])
        self.ego = EgoVehicle(
            ego_id,
            self.road.lane_of(track.y[0]),
            float(track.x[0]),
            float(track.y[0]),
            heading=math.atan2(track.vy[0], track.vx[0]),
            vx=float(track.vx[0]),
            vy=float(track.vy[0]),
            length=track.length,
            width=track.width,
            speed=speed,
        )
        return self.observe()

    def others(self) -> Sequence[VehicleState]:
        if self._vehicles_frame != self.frame:
            vehicles = []
            for vehicle_id, track in self.tracks.items():
                k = track.index_at(self.frame)
                if vehicle_id == self.ego_id or k is None:
                    continue
                accel = (track.vx[k] - track.vx[k - 1]) / track.dt if k > 0 else 0.0
                vehicles.append(
                    TrafficVehicle(
                        vehicle_id,
                        int(track.lane_ids[k]),
                        float(track.x[k]),
                        float(track.y[k]),
                        heading=math.atan2(track.vy[k], track.vx[k]),
                        vx=float(track.vx[k]),
                        vy=float(track.vy[k]),
                        length=track.length,
                        width=track.width,
                        desired_speed=float(track.vx[k]),
                        accel=float(accel),
                    )
                )
            self._vehicles = vehicles
            self._vehicles_frame = self.frame
        return self._vehicles

    def _advance_traffic(self, dt: float) -> None:
        if abs(dt - self.config.dt) > 1e-12:
            raise SimulationFault(
                f"Replay runs at the recording step {self.config.dt}, got dt={dt}",
                state=self.state_dump(),
            )
        self.frame += 1

    def _recording_finished(self) -> bool:
        return self.frame >= self.end_frame


@dataclass
class ReplayResult:
    metrics: EpisodeMetrics
    record: EpisodeRecord
    trajectory: TrajectoryLog


def replay_episode(
    recording: Recording,
    ego_id: int,
    policy: Policy,
    env_config: EnvConfig,
    reward_config: RewardConfig,
    weights: Sequence[float],
    min_episode_seconds: float = 5.0,
    debounce: float = 1.0,
) -> ReplayResult:
    """
    Let ``policy`` drive recorded vehicle ``ego_id`` among the replayed SVs.

    Args:
        recording: Parsed recording at the simulator step
        ego_id: Vehicle substituted by the EV
        policy: Maps (observation, env) to controls
        env_config: Simulator settings; the road is replaced by the recording's
        reward_config: Reward constants
        weights: Objective weights for the total reward
        min_episode_seconds: Shortest acceptable recorded span of the vehicle
        debounce: Lane-change persistence for the NL metric

    Returns:
        Metrics, the episode record and the full trajectory log

    Raises:
        SelectionError: If the vehicle is absent or its track is too short
    """
    if abs(recording.dt - env_config.dt) > 1e-12:
        raise ConfigError(f"Recording resampled at dt={recording.dt}, simulator uses {env_config.dt}")
    track = recording.tracks.get(ego_id)
    if track is None:
        raise SelectionError(f"Vehicle {ego_id} is not in recording '{recording.name}'")
    if track.duration < min_episode_seconds:
        raise SelectionError(
            f"Vehicle {ego_id} is recorded for {track.duration:.1f} s, "
            f"shorter than {min_episode_seconds} s"
        )
    direction = recording.direction_of(ego_id)
    config = replace(env_config, road=recording.road(direction))
    trajectory = TrajectoryLog()
    env = ReplayHighway(recording.canonical_tracks(direction), config, trajectory)
    observation = env.reset(ego_id)
    record = run_episode(env, observation, policy, reward_config, weights)
    metrics = episode_metrics(record, debounce)
    metrics.ego_id = ego_id
    logger.info(
        f"Replayed vehicle {ego_id} for {record.steps} steps "
        f"(unsafe={record.unsafe}, AR={metrics.average_reward:.3f})"
    )
    return ReplayResult(metrics, record, trajectory)


def evaluate_recording(
    recording: Recording,
    policy_factory: Callable[[], Policy],
    episodes: int,
    seed: int,
    env_config: EnvConfig,
    reward_config: RewardConfig,
    weights: Sequence[float],
    min_episode_seconds: float = 5.0,
    debounce: float = 1.0,
) -> List[EpisodeMetrics]:
    """
    Replay ``episodes`` randomly chosen vehicles; the choice is seeded.

    Raises:
        SelectionError: If no vehicle is recorded long enough
    """
    if episodes <= 0:
        return []
    eligible = recording.eligible(min_episode_seconds)
    if not eligible:
        raise SelectionError(f"No vehicle in '{recording.name}' lasts {min_episode_seconds} s")
    rng = np.random.default_rng(seed)
    if episodes > len(eligible):
        logger.warning(f"Only {len(eligible)} eligible vehicles for {episodes} episodes; repeating")
    chosen = rng.choice(eligible, size=episodes, replace=episodes > len(eligible))
    return [
        replay_episode(
            recording,
            int(ego_id),
            policy_factory(),
            env_config,
            reward_config,
            weights,
            min_episode_seconds,
            debounce,
        ).metrics
        for ego_id in chosen
    ]


@dataclass(frozen=True)
class FixtureSpec:
    """Parametric synthetic recording."""

    scenario: str = "constant"
    vehicles: int = 1
    duration: float = 20.0
    frame_rate: float = 25.0
    lane_count: int = 3
    lane_width: float = 4.0
    speed: float = 12.0
    spacing: float = 30.0
    direction: str = "lower"
    seed: int = 0
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    recording_id: str = "01"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"Unknown fixture scenario '{self.scenario}'. Supported: {', '.join(SCENARIOS)}")
        if self.vehicles < 0 or self.duration <= 0 or self.frame_rate <= 0:
            raise ConfigError("Fixture needs vehicles >= 0, duration > 0 and frame_rate > 0")
        if self.lane_count < 2:
            raise ConfigError("Fixture needs at least two lanes")
        if self.direction not in ("lower", "upper"):
            raise ConfigError(f"Fixture direction must be 'lower' or 'upper', got '{self.direction}'")
        if self.scenario in ("cut_in", "stopped_leader") and self.vehicles < 2:
            raise ConfigError(f"Scenario '{self.scenario}' needs at least two vehicles")


@dataclass
class FixtureFiles:
    tracks: Path
    meta: Path


def fixture_meta(spec: FixtureSpec) -> RecordingMeta:
    width, lanes = spec.lane_width, spec.lane_count
    upper = tuple(FIXTURE_EDGE + k * width for k in range(lanes + 1))
    lower = tuple(upper[-1] + FIXTURE_MEDIAN + k * width for k in range(lanes + 1))
    return RecordingMeta(spec.frame_rate, lower, upper)


def _road_frame_motion(spec: FixtureSpec, times: np.ndarray) -> List[Tuple[np.ndarray, ...]]:
    """Per vehicle (x, y, vx, vy) sampled at ``times`` in the road frame."""
    road = RoadSpec(spec.lane_count, spec.lane_width, REPLAY_ROAD_LENGTH)
    rng = np.random.default_rng(spec.seed)
    ones = np.ones_like(times)
    motion = []

    def cruise(lane: int, x0: float, speed: float):
        return (x0 + speed * times, road.lane_center(lane) * ones, speed * ones, 0.0 * ones)

    for v in range(spec.vehicles):
        x0 = 10.0 + spec.spacing * v
        if spec.scenario == "constant":
            motion.append(cruise(v % spec.lane_count, x0, spec.speed))
        elif spec.scenario == "platoon":
            motion.append(cruise(1, x0, spec.speed))
        elif spec.scenario == "free_flow":
            lane = int(rng.integers(spec.lane_count))
            motion.append(cruise(lane, 10.0 + spec.spacing * spec.lane_count * v, spec.speed + rng.uniform(-1.0, 1.0)))
        elif spec.scenario == "cut_in" and v == 1:
            x, y, vx, vy = cruise(1, x0, spec.speed - 2.0)
            start, span = 2.0, 3.0
            phase = np.clip((times - start) / span, 0.0, 1.0)
            shift = road.lane_center(0) - road.lane_center(1)
            y = y + shift * 0.5 * (1.0 - np.cos(math.pi * phase))
            moving = (times > start) & (times < start + span)
            vy = np.where(moving, shift * 0.5 * math.pi / span * np.sin(math.pi * phase), 0.0)
            motion.append((x, y, vx, vy))
        elif spec.scenario == "stopped_leader" and v == 1:
            motion.append(cruise(0, 10.0 + STOPPED_LEADER_GAP, 0.0))
        elif spec.scenario in ("cut_in", "stopped_leader") and v == 0:
            motion.append(cruise(0, x0, spec.speed))
        else:
            motion.append(cruise(spec.lane_count - 1, x0, spec.speed))
    return motion


def fixture_tracks(spec: FixtureSpec) -> List[Track]:
    """Synthetic tracks in HighD image coordinates sampled at the fixture frame rate."""
    meta = fixture_meta(spec)
    direction = LOWER if spec.direction == "lower" else UPPER
    markings = meta.markings(direction)
    road = RoadSpec(spec.lane_count, spec.lane_width, REPLAY_ROAD_LENGTH)
    frames = np.arange(int(round(spec.duration * spec.frame_rate)) + 1)
    times = frames / spec.frame_rate
    tracks = []
    for v, (x, y, vx, vy) in enumerate(_road_frame_motion(spec, times)):
        lanes = np.array([highd_lane_id(road.lane_of(value), direction, meta) for value in y])
        if direction == LOWER:
            image = (x, markings[-1] - y, vx, -vy)
        else:
            image = (FIXTURE_X_REFERENCE - x, y + markings[0], -vx, vy)
        tracks.append(
            Track(v + 1, frames, *image, lane_ids=lanes, length=spec.vehicle_length, width=spec.vehicle_width, dt=1.0 / spec.frame_rate)
        )
    return tracks


def make_fixture(spec: FixtureSpec, directory: Union[str, Path]) -> FixtureFiles:
    """
    Write a deterministic HighD-format recording for ``spec``.

    Returns:
        Paths of the tracks CSV and the meta file
    """
    directory = Path(directory)
    tracks_path = write_tracks(fixture_tracks(spec), directory / f"{spec.recording_id}{TRACKS_SUFFIX}")
    meta_path = fixture_meta(spec).save(directory / f"{spec.recording_id}{META_SUFFIX}")
    logger.info(f"Wrote '{spec.scenario}' fixture with {spec.vehicles} vehicles to {directory}")
    return FixtureFiles(tracks_path, meta_path)
