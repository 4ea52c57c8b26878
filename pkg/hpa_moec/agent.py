"""
Multi-objective ensemble-critic learner.

The actor maps an observation to continuous parameters for every option. Each
of the N objectives owns an ensemble of M critics; a critic reads the
observation plus the full parameter vector and returns one value per option.
Target copies of all networks provide the bootstrap values.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .action import ACTION_DIM, N_OPTIONS, ActionSpace, bounds_arrays, legal_options
from .env import OBS_DIM, STATE_SCALE
from .exceptions import CheckpointError, ConfigError, NumericalError
from .nn import (
    AdamState,
    MlpCache,
    MlpParams,
    MlpSpec,
    adam_step,
    backward_input,
    backward_params,
    forward,
    forward_with_cache,
    load_params,
    save_params,
    soft_update,
)
from .utils import format_value, read_key_values, spawn_seeds, write_key_values

logger = logging.getLogger(__name__)

STATE_DIM = OBS_DIM
CRITIC_INPUT_DIM = STATE_DIM + ACTION_DIM
MANIFEST_NAME = "agent.manifest"


@dataclass(frozen=True)
class AgentConfig:
    """Learner hyperparameters."""

    objectives: int = 2
    ensemble_size: int = 6
    weights: Tuple[float, ...] = (0.4, 0.6)
    loss_weights: Tuple[float, ...] = (0.5, 0.2, 0.2, 0.1)
    gamma: float = 0.9
    critic_lr: float = 0.01
    actor_lr: float = 0.001
    tau: float = 0.005
    hidden_dims: Tuple[int, ...] = (256, 256, 256)
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    space: ActionSpace = field(default_factory=ActionSpace)
    discrete_only: bool = False
    cruise_speed: float = 12.0
    speed_gain: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.objectives < 1 or self.ensemble_size < 1:
            raise ConfigError("Agent needs at least one objective and one critic")
        if len(self.weights) != self.objectives:
            raise ConfigError(
                f"{self.objectives} objectives need {self.objectives} weights, "
                f"got {self.weights}"
            )
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"Objective weights must sum to 1, got {self.weights}")
        if len(self.loss_weights) != 4:
            raise ConfigError(f"agent.loss_weights needs 4 entries, got {self.loss_weights}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"agent.gamma must be in (0, 1), got {self.gamma}")
        if not self.critic_lr > self.actor_lr > 0.0:
            raise ConfigError(
                f"Step sizes must satisfy critic_lr > actor_lr > 0, got "
                f"{self.critic_lr} and {self.actor_lr}"
            )
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"agent.tau must be in [0, 1], got {self.tau}")
        if self.batch_size < 1:
            raise ConfigError("agent.batch_size must be >= 1")

    @property
    def actor_spec(self) -> MlpSpec:
        return MlpSpec(STATE_DIM, ACTION_DIM, self.hidden_dims)

    @property
    def critic_spec(self) -> MlpSpec:
        return MlpSpec(CRITIC_INPUT_DIM, N_OPTIONS, self.hidden_dims)

    def to_manifest(self) -> Dict[str, Any]:
        space = self.space
        return {
            "objectives": self.objectives,
            "ensemble_size": self.ensemble_size,
            "weights": list(self.weights),
            "loss_weights": list(self.loss_weights),
            "gamma": self.gamma,
            "critic_lr": self.critic_lr,
            "actor_lr": self.actor_lr,
            "tau": self.tau,
            "hidden_dims": list(self.hidden_dims),
            "batch_size": self.batch_size,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "discrete_only": self.discrete_only,
            "cruise_speed": self.cruise_speed,
            "speed_gain": self.speed_gain,
            "bounds.lane_count": space.lane_count,
            "bounds.lane_width": space.lane_width,
            "bounds.wheelbase": space.wheelbase,
            "bounds.steer_max": space.steer_max,
            "bounds.accel_max": space.accel_max,
            "bounds.brake_max": space.brake_max,
            "bounds.max_path_length": space.max_path_length,
            "bounds.min_turn_radius": space.min_turn_radius,
        }

    @classmethod
    def from_manifest(cls, values: Dict[str, str]) -> "AgentConfig":
        floats = lambda text: tuple(float(v) for v in text.split(",") if v)  # noqa: E731
        space = ActionSpace(
            lane_count=int(values["bounds.lane_count"]),
            lane_width=float(values["bounds.lane_width"]),
            wheelbase=float(values["bounds.wheelbase"]),
            steer_max=float(values["bounds.steer_max"]),
            accel_max=float(values["bounds.accel_max"]),
            brake_max=float(values["bounds.brake_max"]),
            max_path_length=float(values["bounds.max_path_length"]),
            min_turn_radius=float(values["bounds.min_turn_radius"]),
        )
        return cls(
            objectives=int(values["objectives"]),
            ensemble_size=int(values["ensemble_size"]),
            weights=floats(values["weights"]),
            loss_weights=floats(values["loss_weights"]),
            gamma=float(values["gamma"]),
            critic_lr=float(values["critic_lr"]),
            actor_lr=float(values["actor_lr"]),
            tau=float(values["tau"]),
            hidden_dims=tuple(int(v) for v in values["hidden_dims"].split(",") if v),
            batch_size=int(values["batch_size"]),
            adam_beta1=float(values["adam_beta1"]),
            adam_beta2=float(values["adam_beta2"]),
            adam_eps=float(values["adam_eps"]),
            space=space,
            discrete_only=values["discrete_only"] == "true",
            cruise_speed=float(values["cruise_speed"]),
            speed_gain=float(values["speed_gain"]),
        )


@dataclass
class Transition:
    """One stored interaction: the chosen option index and the raw parameter vector."""

    state: np.ndarray
    parameters: np.ndarray
    option: int
    rewards: np.ndarray
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    """Column-stacked transitions."""

    states: np.ndarray
    parameters: np.ndarray
    options: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.options)


@dataclass
class TdTargets:
    """Bootstrap targets: per critic (N, M, B), per ensemble (N, B), overall (B,)."""

    per_critic: np.ndarray
    per_ensemble: np.ndarray
    overall: np.ndarray


@dataclass
class CriticPass:
    """Online critic values on a batch with the caches for backward passes."""

    inputs: np.ndarray
    values: np.ndarray
    caches: List[List[MlpCache]]


@dataclass
class CriticLoss:
    loss: float
    terms: np.ndarray
    grad: Optional[np.ndarray]


@dataclass
class ActorLoss:
    loss: float
    grad: Optional[np.ndarray]


@dataclass
class UpdateDiagnostics:
    """Losses and gradient norms of one update."""

    critic_losses: np.ndarray
    actor_loss: float
    critic_grad_norm: float
    actor_grad_norm: float
    skipped: int = 0

    @property
    def critic_loss_mean(self) -> float:
        finite = self.critic_losses[np.isfinite(self.critic_losses)]
        return float(finite.mean()) if finite.size else float("nan")


def combined_critic_loss(
    q: np.ndarray,
    q_bar: np.ndarray,
    q_all: np.ndarray,
    y_critic: np.ndarray,
    y_ensemble: np.ndarray,
    y_overall: np.ndarray,
    loss_weights: Tuple[float, ...],
) -> Tuple[float, np.ndarray]:
    """
    Weighted four-term critic loss, each term a batch mean of half squared residuals.

    Terms: own TD error, ensemble-mean error, overall error, and the pull of
    the critic toward its ensemble mean.

    Returns:
        (weighted loss, the four unweighted terms)
    """
    terms = np.array(
        [
            np.mean(0.5 * (y_critic - q) ** 2),
            np.mean(0.5 * (y_ensemble - q_bar) ** 2),
            np.mean(0.5 * (y_overall - q_all) ** 2),
            np.mean(0.5 * (q - q_bar) ** 2),
        ]
    )
    return float(np.dot(loss_weights, terms)), terms


class MoecAgent:
    """Actor, N x M critic ensembles, target copies and their optimizers."""

    def __init__(self, config: AgentConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.training_step = 0
        n, m = config.objectives, config.ensemble_size
        seeds = spawn_seeds(self.seed, 1 + n * m)
        self.actor = MlpParams.initialize(
            config.actor_spec, np.random.default_rng(seeds[0]), seed=seeds[0]
        )
        self.critics = [
            [
                MlpParams.initialize(
                    config.critic_spec,
                    np.random.default_rng(seeds[1 + i * m + j]),
                    seed=seeds[1 + i * m + j],
                )
                for j in range(m)
            ]
            for i in range(n)
        ]
        self.actor_target = self.actor.copy()
        self.critic_targets = [[c.copy() for c in row] for row in self.critics]
        self.actor_opt = self._adam(self.actor, config.actor_lr)
        self.critic_opts = [[self._adam(c, config.critic_lr) for c in row] for row in self.critics]

    def _adam(self, params: MlpParams, lr: float) -> AdamState:
        return AdamState.zeros(
            params.spec.num_params,
            lr,
            beta1=self.config.adam_beta1,
            beta2=self.config.adam_beta2,
            eps=self.config.adam_eps,
        )

    @property
    def objectives(self) -> int:
        return self.config.objectives

    @property
    def ensemble_size(self) -> int:
        return self.config.ensemble_size

    # -- encoding --------------------------------------------------------

    @staticmethod
    def encode_states(states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=float) / STATE_SCALE

    def bounds(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Lower/upper parameter bounds with the leading shape of ``states``."""
        states = np.asarray(states, dtype=float)
        low, high = bounds_arrays(states[..., 4], self.config.space)
        if states.ndim == 1:
            return low[0], high[0]
        return low, high

    def critic_input(self, states: np.ndarray, parameters: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        scaled = np.asarray(parameters, dtype=float) / self.config.space.scale
        return np.concatenate([self.encode_states(states), scaled], axis=-1)

    # -- actor -----------------------------------------------------------

    def _squash(
        self, params: MlpParams, states: np.ndarray
    ) -> Tuple[np.ndarray, MlpCache, np.ndarray, np.ndarray, np.ndarray]:
        raw, cache = forward_with_cache(params, self.encode_states(states))
        unit = np.tanh(raw)
        low, high = self.bounds(states)
        return low + 0.5 * (unit + 1.0) * (high - low), cache, unit, low, high

    def actor_forward(self, states: np.ndarray) -> np.ndarray:
        """Continuous (l, acc) for every option, mapped into the state's bounds."""
        return self._squash(self.actor, states)[0]

    def fixed_parameters(self, states: np.ndarray) -> np.ndarray:
        """Discrete-only parameters: mid-range path length and speed-tracking acc."""
        states = np.asarray(states, dtype=float)
        low, high = self.bounds(states)
        out = 0.5 * (low + high)
        speed = np.hypot(states[..., 4], states[..., 5])
        accel = np.clip(
            self.config.speed_gain * (self.config.cruise_speed - speed),
            -self.config.space.brake_max,
            self.config.space.accel_max,
        )
        out[..., 1::2] = np.asarray(accel)[..., None]
        return out

    def policy_parameters(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        if self.config.discrete_only:
            return self.fixed_parameters(states)
        return self._squash(self.actor_target if target else self.actor, states)[0]

    # -- critics ---------------------------------------------------------

    def critic_forward(self, i: int, j: int, states: np.ndarray, parameters: np.ndarray) -> np.ndarray:
        """Per-option values of critic j in ensemble i."""
        return forward(self.critics[i][j], self.critic_input(states, parameters))

    def critic_values(
        self, states: np.ndarray, parameters: np.ndarray, target: bool = False
    ) -> np.ndarray:
        """All critic outputs stacked as (N, M, ..., |O|)."""
        x = self.critic_input(states, parameters)
        nets = self.critic_targets if target else self.critics
        return np.array([[forward(net, x) for net in row] for row in nets])

    def q_bar(self, i: int, states: np.ndarray, parameters: np.ndarray) -> np.ndarray:
        """Ensemble-mean value of objective i per option."""
        x = self.critic_input(states, parameters)
        return np.mean([forward(net, x) for net in self.critics[i]], axis=0)

    def q_all(self, states: np.ndarray, parameters: np.ndarray) -> np.ndarray:
        """Objective-weighted sum of the ensemble means per option."""
        means = self.critic_values(states, parameters).mean(axis=1)
        return np.tensordot(np.asarray(self.config.weights), means, axes=1)

    def greedy_option(
        self, states: np.ndarray, parameters: np.ndarray, legal: Optional[np.ndarray] = None
    ) -> int:
        """Argmax of q_all over the legal options of one state."""
        values = self.q_all(states, parameters)
        if legal is None:
            legal = legal_options(int(round(np.asarray(states)[0])), self.config.space.lane_count)
        return int(np.argmax(np.where(legal, values, -np.inf)))

    def evaluate_critics(self, batch: Batch) -> CriticPass:
        x = self.critic_input(batch.states, batch.parameters)
        values, caches = [], []
        for row in self.critics:
            outputs = [forward_with_cache(net, x) for net in row]
            values.append([out for out, _ in outputs])
            caches.append([cache for _, cache in outputs])
        return CriticPass(x, np.array(values), caches)

    # -- losses ----------------------------------------------------------

    def td_targets(self, batch: Batch) -> TdTargets:
        """
        Bootstrap targets from the target networks; terminal rows keep the reward.

        Returns:
            TdTargets with shapes (N, M, B), (N, B) and (B,)
        """
        if len(batch) == 0:
            raise ConfigError("td_targets needs a non-empty batch")
        gamma = self.config.gamma
        weights = np.asarray(self.config.weights)
        done = np.asarray(batch.done, dtype=bool)
        rewards = np.asarray(batch.rewards, dtype=float).T
        next_params = self.policy_parameters(batch.next_states, target=True)
        values = self.critic_values(batch.next_states, next_params, target=True)

        per_critic = np.where(done, rewards[:, None, :], rewards[:, None, :] + gamma * values.max(axis=-1))
        means = values.mean(axis=1)
        per_ensemble = np.where(done, rewards, rewards + gamma * means.max(axis=-1))
        overall_reward = weights @ rewards
        overall_values = np.tensordot(weights, means, axes=1)
        overall = np.where(done, overall_reward, overall_reward + gamma * overall_values.max(axis=-1))
        return TdTargets(per_critic, per_ensemble, overall)

    def critic_loss(
        self,
        i: int,
        j: int,
        batch: Batch,
        targets: TdTargets,
        critic_pass: Optional[CriticPass] = None,
    ) -> CriticLoss:
        """
        Combined loss of critic (i, j) at the stored options and its gradient.

        Ensemble means inside the loss treat the other critics as constants.
        """
        if critic_pass is None:
            critic_pass = self.evaluate_critics(batch)
        m = self.ensemble_size
        rows = np.arange(len(batch))
        options = np.asarray(batch.options, dtype=int)
        chosen = critic_pass.values[:, :, rows, options]
        q = chosen[i, j]
        q_bar = chosen[i].mean(axis=0)
        q_all = np.asarray(self.config.weights) @ chosen.mean(axis=1)

        loss, terms = combined_critic_loss(
            q,
            q_bar,
            q_all,
            targets.per_critic[i, j],
            targets.per_ensemble[i],
            targets.overall,
            self.config.loss_weights,
        )
        if not np.isfinite(loss):
            logger.warning(f"Non-finite loss for critic ({i}, {j}); skipping its update")
            return CriticLoss(loss, terms, None)

        lam = self.config.loss_weights
        weight = self.config.weights[i]
        dq = (
            lam[0] * (q - targets.per_critic[i, j])
            + lam[1] * (q_bar - targets.per_ensemble[i]) / m
            + lam[2] * (q_all - targets.overall) * weight / m
            + lam[3] * (q - q_bar) * (1.0 - 1.0 / m)
        ) / len(batch)
        output_grad = np.zeros((len(batch), N_OPTIONS))
        output_grad[rows, options] = dq
        grad = backward_params(
            self.critics[i][j], critic_pass.inputs, output_grad, critic_pass.caches[i][j]
        )
        return CriticLoss(loss, terms, grad)

    def actor_loss(self, states: np.ndarray) -> ActorLoss:
        """
        Negative weighted ensemble value of the actor's own parameters.

        Critics stay fixed; the gradient reaches the actor through their inputs.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        batch = len(states)
        parameters, cache, unit, low, high = self._squash(self.actor, states)
        x = self.critic_input(states, parameters)
        scale = self.config.space.scale
        loss = 0.0
        grad_params = np.zeros_like(parameters)
        for i, row in enumerate(self.critics):
            coef = self.config.weights[i] / self.ensemble_size
            for net in row:
                values, critic_cache = forward_with_cache(net, x)
                loss -= coef * float(values.sum(axis=1).mean())
                dx = backward_input(net, x, np.full(values.shape, -coef / batch), critic_cache)
                grad_params += dx[:, STATE_DIM:] / scale
        if not np.isfinite(loss):
            logger.warning("Non-finite actor loss; skipping actor update")
            return ActorLoss(loss, None)
        draw = grad_params * 0.5 * (high - low) * (1.0 - unit**2)
        grad = backward_params(self.actor, self.encode_states(states), draw, cache)
        return ActorLoss(loss, grad)

    # -- update ----------------------------------------------------------

    def _apply(self, params: MlpParams, grad: np.ndarray, state: AdamState, name: str):
        try:
            return adam_step(params, grad, state)
        except NumericalError as e:
            logger.warning(f"Skipped {name} update: {e}")
            return None

    def update(self, batch: Batch) -> UpdateDiagnostics:
        """
        One gradient step for every critic, then the actor, then the targets.

        Returns:
            Losses, gradient norms and the number of skipped network updates
        """
        n, m = self.objectives, self.ensemble_size
        targets = self.td_targets(batch)
        critic_pass = self.evaluate_critics(batch)
        losses = np.full((n, m), np.nan)
        norms = []
        skipped = 0
        for i in range(n):
            for j in range(m):
                result = self.critic_loss(i, j, batch, targets, critic_pass)
                losses[i, j] = result.loss
                if result.grad is None:
                    skipped += 1
                    continue
                norms.append(float(np.linalg.norm(result.grad)))
                applied = self._apply(self.critics[i][j], result.grad, self.critic_opts[i][j], f"critic ({i}, {j})")
                if applied is None:
                    skipped += 1
                    continue
                self.critics[i][j], self.critic_opts[i][j] = applied

        actor_loss, actor_norm = 0.0, 0.0
        if not self.config.discrete_only:
            result = self.actor_loss(batch.states)
            actor_loss = result.loss
            if result.grad is None:
                skipped += 1
            else:
                actor_norm = float(np.linalg.norm(result.grad))
                applied = self._apply(self.actor, result.grad, self.actor_opt, "actor")
                if applied is None:
                    skipped += 1
                else:
                    self.actor, self.actor_opt = applied

        tau = self.config.tau
        if tau > 0:
            self.critic_targets = [
                [soft_update(t, c, tau) for t, c in zip(t_row, c_row)]
                for t_row, c_row in zip(self.critic_targets, self.critics)
            ]
            self.actor_target = soft_update(self.actor_target, self.actor, tau)
        self.training_step += 1
        return UpdateDiagnostics(
            losses,
            actor_loss,
            float(np.mean(norms)) if norms else 0.0,
            actor_norm,
            skipped,
        )

    # -- persistence -----------------------------------------------------

    def snapshot(self) -> "MoecAgent":
        """Read-only copy for rollouts on other threads."""
        clone = MoecAgent.__new__(MoecAgent)
        clone.config = self.config
        clone.seed = self.seed
        clone.training_step = self.training_step
        clone.actor = self.actor.copy()
        clone.actor_target = self.actor_target.copy()
        clone.critics = [[c.copy() for c in row] for row in self.critics]
        clone.critic_targets = [[c.copy() for c in row] for row in self.critic_targets]
        clone.actor_opt = self.actor_opt.copy()
        clone.critic_opts = [[s.copy() for s in row] for row in self.critic_opts]
        return clone

    def _networks(self):
        yield "actor", self.actor
        yield "actor_target", self.actor_target
        for i, row in enumerate(self.critics):
            for j, net in enumerate(row):
                yield f"critic_{i}_{j}", net
        for i, row in enumerate(self.critic_targets):
            for j, net in enumerate(row):
                yield f"critic_target_{i}_{j}", net

    def save(self, directory: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        """
        Write every network plus ``agent.manifest`` into ``directory``.

        Returns:
            The checkpoint directory
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self._networks():
            save_params(net, directory / name)
        manifest = self.config.to_manifest()
        manifest.update(
            {
                "state_dim": STATE_DIM,
                "action_dim": ACTION_DIM,
                "options": N_OPTIONS,
                "seed": self.seed,
                "training_step": self.training_step,
            }
        )
        manifest.update(extra or {})
        write_key_values(directory / MANIFEST_NAME, manifest, header="hpa-moec agent checkpoint")
        logger.info(f"Saved agent checkpoint at step {self.training_step} to {directory}")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "MoecAgent":
        """
        Restore an agent written by ``save``.

        Raises:
            CheckpointError: If the manifest or any network is missing or inconsistent
        """
        directory = Path(directory)
        try:
            values = read_key_values(directory / MANIFEST_NAME)
        except ConfigError:
            raise CheckpointError(f"No agent checkpoint in {directory}")
        try:
            dims = (int(values["state_dim"]), int(values["action_dim"]), int(values["options"]))
            config = AgentConfig.from_manifest(values)
        except (KeyError, ValueError, ConfigError) as e:
            raise CheckpointError(f"Corrupt agent manifest in {directory}: {e}")
        if dims != (STATE_DIM, ACTION_DIM, N_OPTIONS):
            raise CheckpointError(
                f"Checkpoint dimensions {dims} do not match "
                f"{(STATE_DIM, ACTION_DIM, N_OPTIONS)}"
            )
        agent = cls.__new__(cls)
        agent.config = config
        agent.seed = int(values.get("seed", 0))
        agent.training_step = int(values.get("training_step", 0))
        n, m = config.objectives, config.ensemble_size

        def restore(name: str, spec: MlpSpec) -> MlpParams:
            params = load_params(directory / name)
            if params.spec != spec:
                raise CheckpointError(f"Network {name} does not match the agent manifest")
            return params

        agent.actor = restore("actor", config.actor_spec)
        agent.actor_target = restore("actor_target", config.actor_spec)
        agent.critics = [[restore(f"critic_{i}_{j}", config.critic_spec) for j in range(m)] for i in range(n)]
        agent.critic_targets = [
            [restore(f"critic_target_{i}_{j}", config.critic_spec) for j in range(m)] for i in range(n)
        ]
        agent.actor_opt = agent._adam(agent.actor, config.actor_lr)
        agent.critic_opts = [[agent._adam(c, config.critic_lr) for c in row] for row in agent.critics]
        logger.info(f"Loaded agent checkpoint (step {agent.training_step}) from {directory}")
        return agent

    @property
    def description(self) -> str:
        return (
            f"N={self.objectives} M={self.ensemble_size} "
            f"hidden={format_value(list(self.config.hidden_dims))}"
        )
