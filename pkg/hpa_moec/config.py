"""
Configuration management for hpa-moec.

Settings are flat ``section.key = value`` files read with python-decouple.
Layers, lowest first: the shipped defaults, an optional profile, a user file,
``--override`` pairs, ``HPA_MOEC_<SECTION>_<KEY>`` environment variables and
finally ``HPA_MOEC_OUT`` for the output directory.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

from decouple import Choices, Config, Csv, RepositoryEmpty, config

from .action import ActionSpace, ControllerConfig, PidGains, StanleyGains
from .agent import AgentConfig
from .env import EnvConfig, IdmParams, MobilParams, RoadSpec
from .exceptions import ConfigError
from .explore import ExploreConfig
from .reward import RewardConfig
from .trainer import MODES, Experiment, TrainConfig
from .utils import read_key_values, text_sha256, write_key_values

logger = logging.getLogger(__name__)

CONF_DIR = Path(__file__).resolve().parent / "conf"
DEFAULTS_PATH = CONF_DIR / "defaults.cfg"
PROFILES = {"desk": CONF_DIR / "desk.cfg"}
ENV_PREFIX = "HPA_MOEC_"
OUT_ENV = "HPA_MOEC_OUT"
SNAPSHOT_NAME = "resolved.cfg"


@dataclass(frozen=True)
class Setting:
    cast: Any
    doc: str


FLOATS = Csv(cast=float, post_process=tuple)
INTS = Csv(cast=int, post_process=tuple)

SCHEMA: Dict[str, Setting] = {
    "env.lane_count": Setting(int, "Number of lanes"),
    "env.lane_width": Setting(float, "Lane width (m)"),
    "env.road_length": Setting(float, "Ring road circumference (m)"),
    "env.dt": Setting(float, "Control step (s)"),
    "env.episode_seconds": Setting(float, "Episode cap (s)"),
    "env.density": Setting(float, "Traffic volume/capacity ratio in [0, 1)"),
    "env.capacity_per_lane_km": Setting(float, "Vehicles per lane and km at V/C = 1"),
    "env.wheelbase": Setting(float, "EV wheelbase (m)"),
    "env.vehicle_length": Setting(float, "Vehicle length (m)"),
    "env.vehicle_width": Setting(float, "Vehicle width (m)"),
    "env.steer_max": Setting(float, "Steering limit (rad)"),
    "env.accel_max": Setting(float, "Acceleration limit (m/s^2)"),
    "env.brake_max": Setting(float, "Braking limit (m/s^2)"),
    "env.observe_behind": Setting(float, "Observation range behind the EV (m)"),
    "env.observe_ahead": Setting(float, "Observation range ahead of the EV (m)"),
    "env.ego_speed_min": Setting(float, "Lowest initial EV speed (m/s)"),
    "env.ego_speed_max": Setting(float, "Highest initial EV speed (m/s)"),
    "env.spawn_attempts": Setting(int, "Placement attempts per SV"),
    "env.spawn_headway": Setting(float, "Extra spawn headway (s)"),
    "env.ego_in_traffic": Setting(bool, "SVs react to the EV"),
    "env.mobil_enabled": Setting(bool, "SVs change lanes"),
    "idm.speed_min": Setting(float, "Lowest SV desired speed (m/s)"),
    "idm.speed_max": Setting(float, "Highest SV desired speed (m/s)"),
    "idm.time_headway": Setting(float, "IDM time headway (s)"),
    "idm.min_gap": Setting(float, "IDM jam distance (m)"),
    "idm.accel": Setting(float, "IDM maximum acceleration (m/s^2)"),
    "idm.decel": Setting(float, "IDM comfortable deceleration (m/s^2)"),
    "idm.exponent": Setting(float, "IDM acceleration exponent"),
    "mobil.politeness": Setting(float, "MOBIL politeness factor"),
    "mobil.threshold": Setting(float, "MOBIL switching threshold (m/s^2)"),
    "mobil.safe_decel": Setting(float, "MOBIL safe braking limit (m/s^2)"),
    "mobil.decision_period": Setting(float, "Seconds between lane decisions of one SV"),
    "mobil.lane_change_time": Setting(float, "Duration of an SV lane change (s)"),
    "action.max_path_length": Setting(float, "Cap on the path length (m)"),
    "action.min_path_length": Setting(float, "Shortest buildable path (m)"),
    "action.min_turn_radius": Setting(float, "Minimum turning radius R0 (m)"),
    "action.horizon": Setting(int, "Sampled path points"),
    "action.stanley_gain": Setting(float, "Stanley cross-track gain"),
    "action.stanley_soft_speed": Setting(float, "Stanley softening speed (m/s)"),
    "action.pid_kp": Setting(float, "Lane-centre controller lateral gain"),
    "action.pid_kd": Setting(float, "Lane-centre controller lateral-speed gain"),
    "action.pid_kh": Setting(float, "Lane-centre controller heading gain"),
    "action.speed_gain": Setting(float, "Speed-tracking gain of discrete-only actions (1/s)"),
    "reward.target_speed": Setting(float, "Desired EV speed (m/s)"),
    "reward.low_speed": Setting(float, "Speed below which slowness is penalised (m/s)"),
    "reward.ttc_max": Setting(float, "TTC saturation (s)"),
    "reward.weights": Setting(FLOATS, "Objective weights (safety, general)"),
    "reward.eff_negated": Setting(bool, "Efficiency term penalises speed deviation"),
    "agent.ensemble_size": Setting(int, "Critics per ensemble M"),
    "agent.hidden_dims": Setting(INTS, "Hidden layer sizes"),
    "agent.loss_weights": Setting(FLOATS, "Critic loss weights"),
    "agent.gamma": Setting(float, "Discount factor"),
    "agent.critic_lr": Setting(float, "Critic step size"),
    "agent.actor_lr": Setting(float, "Actor step size"),
    "agent.tau": Setting(float, "Soft target update rate"),
    "agent.batch_size": Setting(int, "Sample batch size"),
    "agent.adam_beta1": Setting(float, "Adam first-moment decay"),
    "agent.adam_beta2": Setting(float, "Adam second-moment decay"),
    "agent.adam_eps": Setting(float, "Adam denominator offset"),
    "explore.candidates": Setting(int, "Candidate count K"),
    "explore.varsigma_start": Setting(float, "Initial exploration weight"),
    "explore.varsigma_end": Setting(float, "Final exploration weight"),
    "explore.threshold": Setting(float, "State-variance threshold for sampling options"),
    "explore.noise_scale": Setting(float, "Gaussian noise scale of random exploration"),
    "trainer.total_steps": Setting(int, "Environment steps T"),
    "trainer.warmup": Setting(int, "Transitions before updates; 0 means 4 batches"),
    "trainer.buffer_size": Setting(int, "Replay buffer size D"),
    "trainer.mode": Setting(Choices(list(MODES)), "Ablation mode"),
    "trainer.seeds": Setting(INTS, "Training seeds"),
    "trainer.checkpoint_every": Setting(int, "Steps between checkpoints; 0 disables"),
    "trainer.eval_episodes": Setting(int, "Evaluation episodes"),
    "trainer.max_nonfinite": Setting(int, "Tolerated consecutive failed updates"),
    "trainer.workers": Setting(int, "Evaluation threads"),
    "trainer.window": Setting(int, "Reward window for learning summaries (steps)"),
    "trainer.lane_change_debounce": Setting(float, "Lane-change persistence for NL (s)"),
    "trainer.min_episode_seconds": Setting(float, "Shortest HighD vehicle accepted as EV (s)"),
    "run.output_dir": Setting(str, "Directory for run artifacts"),
}

ALIASES = {"trainer.T": "trainer.total_steps"}


class RepositoryMapping(RepositoryEmpty):
    """decouple repository over an in-memory mapping."""

    def __init__(self, data: Dict[str, str]):
        self.data = dict(data)

    def __contains__(self, key):
        return key in self.data

    def __getitem__(self, key):
        return self.data[key]


def env_variable(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


def resolve_config_path(path: Union[str, Path]) -> Path:
    """A user path, or the shipped file of that name when no such user file exists."""
    path = Path(path)
    shipped = CONF_DIR / path.name
    if not path.exists() and path.parent == Path(".") and shipped.is_file():
        return shipped
    return path


def parse_override(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


class RunConfig:
    """
    Merged, validated settings of one invocation.

    Typed values are read with ``get``; section builders return the module
    config objects.
    """

    def __init__(self, values: Dict[str, str], sources: Optional[Dict[str, str]] = None):
        self.values = dict(values)
        self.sources = dict(sources or {})
        missing = [key for key in SCHEMA if key not in self.values]
        if missing:
            raise ConfigError(f"Configuration missing keys: {', '.join(missing)}")
        reader = Config(RepositoryMapping(self.values))
        self._typed: Dict[str, Any] = {}
        for key, setting in SCHEMA.items():
            try:
                self._typed[key] = reader.get(key, cast=setting.cast)
            except ValueError as e:
                raise ConfigError(
                    f"Invalid value '{self.values[key]}' for {key} "
                    f"(from {self.sources.get(key, 'defaults')}): {e}"
                )
        self.experiment()

    @classmethod
    def load(
        cls,
        config_file: Optional[Union[str, Path]] = None,
        overrides: Iterable[str] = (),
        profile: Optional[str] = None,
        seed: Optional[int] = None,
        out: Optional[Union[str, Path]] = None,
        use_environment: bool = True,
    ) -> "RunConfig":
        """
        Merge all configuration layers.

        Raises:
            ConfigError: On missing files, unknown keys or invalid values
        """
        values: Dict[str, str] = {}
        sources: Dict[str, str] = {}

        def merge(layer: Dict[str, str], source: str) -> None:
            for raw_key, value in layer.items():
                key = ALIASES.get(raw_key, raw_key)
                if key not in SCHEMA:
                    raise ConfigError(f"Unknown configuration key '{raw_key}' in {source}")
                values[key] = value
                sources[key] = source

        merge(read_key_values(DEFAULTS_PATH), str(DEFAULTS_PATH))
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError(f"Unknown profile '{profile}'. Supported: {', '.join(PROFILES)}")
            merge(read_key_values(PROFILES[profile]), f"profile {profile}")
        if config_file is not None:
            config_file = resolve_config_path(config_file)
            merge(read_key_values(config_file), str(config_file))
        merge(dict(parse_override(text) for text in overrides), "--override")
        if seed is not None:
            merge({"trainer.seeds": str(seed)}, "--seed")
        if out is not None:
            merge({"run.output_dir": str(out)}, "--out")
        if use_environment:
            found = {}
            for key in SCHEMA:
                value = config(env_variable(key), default=None)
                if value is not None:
                    found[key] = value
            merge(found, "environment")
            out_env = config(OUT_ENV, default=None)
            if out_env:
                merge({"run.output_dir": out_env}, OUT_ENV)
        return cls(values, sources)

    def get(self, key: str) -> Any:
        key = ALIASES.get(key, key)
        if key not in self._typed:
            raise ConfigError(f"Unknown configuration key '{key}'")
        return self._typed[key]

    def __getitem__(self, key: str) -> Any:
        return self.get(key)

    @property
    def seeds(self) -> Tuple[int, ...]:
        return self.get("trainer.seeds")

    @property
    def output_dir(self) -> Path:
        return Path(self.get("run.output_dir"))

    # -- section builders ------------------------------------------------

    def road_spec(self) -> RoadSpec:
        g = self.get
        return RoadSpec(g("env.lane_count"), g("env.lane_width"), g("env.road_length"))

    def env_config(self) -> EnvConfig:
        g = self.get
        return EnvConfig(
            road=self.road_spec(),
            dt=g("env.dt"),
            episode_seconds=g("env.episode_seconds"),
            density=g("env.density"),
            capacity_per_lane_km=g("env.capacity_per_lane_km"),
            wheelbase=g("env.wheelbase"),
            vehicle_length=g("env.vehicle_length"),
            vehicle_width=g("env.vehicle_width"),
            steer_max=g("env.steer_max"),
            accel_max=g("env.accel_max"),
            brake_max=g("env.brake_max"),
            observe_behind=g("env.observe_behind"),
            observe_ahead=g("env.observe_ahead"),
            ego_speed_range=(g("env.ego_speed_min"), g("env.ego_speed_max")),
            spawn_attempts=g("env.spawn_attempts"),
            spawn_headway=g("env.spawn_headway"),
            ego_in_traffic=g("env.ego_in_traffic"),
            mobil_enabled=g("env.mobil_enabled"),
        )

    def idm_params(self) -> IdmParams:
        g = self.get
        return IdmParams(
            speed_range=(g("idm.speed_min"), g("idm.speed_max")),
            time_headway=g("idm.time_headway"),
            min_gap=g("idm.min_gap"),
            accel=g("idm.accel"),
            decel=g("idm.decel"),
            exponent=g("idm.exponent"),
        )

    def mobil_params(self) -> MobilParams:
        g = self.get
        return MobilParams(
            politeness=g("mobil.politeness"),
            threshold=g("mobil.threshold"),
            safe_decel=g("mobil.safe_decel"),
            decision_period=g("mobil.decision_period"),
            lane_change_time=g("mobil.lane_change_time"),
        )

    def action_space(self) -> ActionSpace:
        g = self.get
        return ActionSpace(
            lane_count=g("env.lane_count"),
            lane_width=g("env.lane_width"),
            wheelbase=g("env.wheelbase"),
            steer_max=g("env.steer_max"),
            accel_max=g("env.accel_max"),
            brake_max=g("env.brake_max"),
            max_path_length=g("action.max_path_length"),
            min_turn_radius=g("action.min_turn_radius"),
        )

    def controller_config(self) -> ControllerConfig:
        g = self.get
        return ControllerConfig(
            space=self.action_space(),
            horizon=g("action.horizon"),
            min_path_length=g("action.min_path_length"),
            stanley=StanleyGains(g("action.stanley_gain"), g("action.stanley_soft_speed")),
            pid=PidGains(g("action.pid_kp"), g("action.pid_kd"), g("action.pid_kh")),
        )

    def reward_config(self) -> RewardConfig:
        g = self.get
        return RewardConfig(
            target_speed=g("reward.target_speed"),
            low_speed=g("reward.low_speed"),
            ttc_max=g("reward.ttc_max"),
            steer_max=g("env.steer_max"),
            accel_max=g("env.accel_max"),
            weights=g("reward.weights"),
            eff_negated=g("reward.eff_negated"),
        )

    def agent_config(self) -> AgentConfig:
        g = self.get
        weights = g("reward.weights")
        return AgentConfig(
            objectives=len(weights),
            ensemble_size=g("agent.ensemble_size"),
            weights=weights,
            loss_weights=g("agent.loss_weights"),
            gamma=g("agent.gamma"),
            critic_lr=g("agent.critic_lr"),
            actor_lr=g("agent.actor_lr"),
            tau=g("agent.tau"),
            hidden_dims=g("agent.hidden_dims"),
            batch_size=g("agent.batch_size"),
            adam_beta1=g("agent.adam_beta1"),
            adam_beta2=g("agent.adam_beta2"),
            adam_eps=g("agent.adam_eps"),
            space=self.action_space(),
            cruise_speed=g("reward.target_speed"),
            speed_gain=g("action.speed_gain"),
        )

    def explore_config(self) -> ExploreConfig:
        g = self.get
        return ExploreConfig(
            candidates=g("explore.candidates"),
            varsigma_start=g("explore.varsigma_start"),
            varsigma_end=g("explore.varsigma_end"),
            threshold=g("explore.threshold"),
            noise_scale=g("explore.noise_scale"),
        )

    def train_config(self) -> TrainConfig:
        g = self.get
        return TrainConfig(
            total_steps=g("trainer.total_steps"),
            warmup=g("trainer.warmup"),
            buffer_size=g("trainer.buffer_size"),
            mode=g("trainer.mode"),
            seeds=g("trainer.seeds"),
            checkpoint_every=g("trainer.checkpoint_every"),
            eval_episodes=g("trainer.eval_episodes"),
            max_nonfinite=g("trainer.max_nonfinite"),
            workers=g("trainer.workers"),
            window=g("trainer.window"),
            lane_change_debounce=g("trainer.lane_change_debounce"),
            min_episode_seconds=g("trainer.min_episode_seconds"),
        )

    def experiment(self, mode: Optional[str] = None) -> Experiment:
        """All module configs with the configured (or given) ablation mode applied."""
        experiment = Experiment(
            env=self.env_config(),
            idm=self.idm_params(),
            mobil=self.mobil_params(),
            controller=self.controller_config(),
            reward=self.reward_config(),
            agent=self.agent_config(),
            explore=self.explore_config(),
            train=self.train_config(),
        )
        experiment.train.resolved_warmup(experiment.agent.batch_size)
        return experiment.with_mode(mode)

    # -- snapshot --------------------------------------------------------

    def resolved_text(self) -> str:
        return "".join(f"{key}={self.values[key]}\n" for key in sorted(self.values))

    @property
    def fingerprint(self) -> str:
        return text_sha256(self.resolved_text())

    def snapshot(self, directory: Union[str, Path]) -> Path:
        """
        Write the resolved settings, sorted by key, to ``resolved.cfg``.

        Returns:
            The snapshot path
        """
        path = write_key_values(
            Path(directory) / SNAPSHOT_NAME,
            {key: self.values[key] for key in sorted(self.values)},
            header=f"sha256 {self.fingerprint}",
        )
        logger.info(f"Wrote resolved configuration {self.fingerprint[:12]} to {path}")
        return path
