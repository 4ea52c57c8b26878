"""
Uncertainty-guided exploration.

Ensemble disagreement (population variance over the M critics) measures how
little the agent knows about a state-action pair. Its gradient with respect to
the continuous parameters perturbs the actor output into a candidate set; the
state-level variance decides between sampling options by uncertainty and
acting greedily. The random source replaces both with noise for ablations.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .action import N_OPTIONS, PARAMS_PER_OPTION, HybridAction, legal_options
from .agent import STATE_DIM, MoecAgent
from .exceptions import ConfigError
from .nn import backward_input, forward_with_cache

logger = logging.getLogger(__name__)

EXPLORATION_SOURCES = ("uncertainty", "random")
ACT_MODES = ("explore", "greedy")


@dataclass(frozen=True)
class ExploreConfig:
    """Candidate count, exploration weight schedule endpoints and the branch threshold."""

    candidates: int = 10
    varsigma_start: float = 1.0
    varsigma_end: float = 0.001
    threshold: float = 0.05
    noise_scale: float = 0.2
    source: str = "uncertainty"

    def __post_init__(self):
        if self.candidates < 1:
            raise ConfigError(f"explore.candidates must be >= 1, got {self.candidates}")
        if not 0.0 < self.varsigma_end <= self.varsigma_start <= 1.0:
            raise ConfigError(
                "explore.varsigma_start/end must satisfy 0 < end <= start <= 1, got "
                f"{self.varsigma_start} and {self.varsigma_end}"
            )
        if self.threshold < 0 or self.noise_scale < 0:
            raise ConfigError("explore.threshold and explore.noise_scale must be >= 0")
        if self.source not in EXPLORATION_SOURCES:
            raise ConfigError(
                f"Unknown exploration source '{self.source}'. "
                f"Supported: {', '.join(EXPLORATION_SOURCES)}"
            )


class ExplorationSchedule:
    """Exponential decay of the exploration weight from start to end over the run."""

    def __init__(self, start: float, end: float, total_steps: int):
        self.start = start
        self.end = end
        self.total_steps = max(int(total_steps), 1)
        self.rate = (end / start) ** (1.0 / self.total_steps)

    @classmethod
    def from_config(cls, config: ExploreConfig, total_steps: int) -> "ExplorationSchedule":
        return cls(config.varsigma_start, config.varsigma_end, total_steps)

    def value(self, step: int) -> float:
        return max(self.end, self.start * self.rate**step)


@dataclass
class UncertaintyReport:
    """
    Ensemble spread at one state and parameter vector.

    ``per_objective`` is (N, |O|), ``total`` the weighted (|O|,) sum, ``state``
    its mean over options and ``gradient`` the derivative of the option-summed
    total with respect to the raw parameter vector.
    """

    per_objective: np.ndarray
    total: np.ndarray
    state: float
    gradient: Optional[np.ndarray] = None


@dataclass
class Decision:
    """Chosen hybrid action with the parameter vector and what produced it."""

    action: HybridAction
    parameters: np.ndarray
    branch: str
    report: Optional[UncertaintyReport] = None


def uncertainty(
    agent: MoecAgent,
    state: np.ndarray,
    parameters: np.ndarray,
    with_gradient: bool = True,
) -> UncertaintyReport:
    """
    Per-objective, weighted and state-level ensemble variances.

    Args:
        agent: Learner whose critics are queried
        state: Raw 42-entry observation
        parameters: Raw 6-entry continuous parameter vector
        with_gradient: Also back-propagate the variance into the parameters

    Returns:
        The UncertaintyReport
    """
    x = agent.critic_input(state, parameters)
    weights = np.asarray(agent.config.weights)
    m = agent.ensemble_size
    outputs = [[forward_with_cache(net, x) for net in row] for row in agent.critics]
    values = np.array([[out for out, _ in row] for row in outputs])
    spread = values - values.mean(axis=1, keepdims=True)
    per_objective = np.mean(spread**2, axis=1)
    total = weights @ per_objective

    gradient = None
    if with_gradient:
        input_grad = np.zeros_like(x)
        for i, row in enumerate(agent.critics):
            for j, net in enumerate(row):
                output_grad = weights[i] * 2.0 * spread[i, j] / m
                input_grad += backward_input(net, x, output_grad, outputs[i][j][1])
        gradient = input_grad[STATE_DIM:] / agent.config.space.scale
    return UncertaintyReport(per_objective, total, float(total.mean()), gradient)


def candidate_set(
    mu: np.ndarray,
    gradient: np.ndarray,
    low: np.ndarray,
    high: np.ndarray,
    count: int,
    varsigma: float,
) -> np.ndarray:
    """
    Actor output shifted along the uncertainty gradient, saturated into bounds.

    Returns:
        (count + 1, D) rows for k = 0..count; row 0 is ``mu`` itself
    """
    if count < 1:
        raise ConfigError(f"Candidate count must be >= 1, got {count}")
    steps = np.arange(count + 1)[:, None] * (varsigma / count)
    return np.clip(np.asarray(mu) + steps * np.asarray(gradient), low, high)


def compose_parameters(candidates: np.ndarray, scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per option, take that option's parameters from the highest-scoring candidate.

    Args:
        candidates: (K, 6) parameter vectors
        scores: (K, |O|) weighted variances of each candidate per option

    Returns:
        (composed 6-entry vector, chosen candidate index per option); ties keep
        the lowest index
    """
    chosen = np.argmax(scores, axis=0)
    composed = np.empty(candidates.shape[1])
    for option, index in enumerate(chosen):
        block = slice(PARAMS_PER_OPTION * option, PARAMS_PER_OPTION * (option + 1))
        composed[block] = candidates[index, block]
    return composed, chosen


def select_continuous(agent: MoecAgent, state: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    candidates = np.atleast_2d(candidates)
    if len(candidates) == 0:
        raise ConfigError("select_continuous needs at least one candidate")
    scores = np.array([uncertainty(agent, state, c, with_gradient=False).total for c in candidates])
    return compose_parameters(candidates, scores)[0]


def softmax_probabilities(values: np.ndarray) -> np.ndarray:
    shifted = np.asarray(values, dtype=float) - np.max(values)
    weights = np.exp(shifted)
    return weights / weights.sum()


def state_legal_options(agent: MoecAgent, state: np.ndarray) -> np.ndarray:
    return legal_options(int(round(float(state[0]))), agent.config.space.lane_count)


def select_discrete(
    agent: MoecAgent,
    state: np.ndarray,
    parameters: np.ndarray,
    report: UncertaintyReport,
    varsigma: float,
    config: ExploreConfig,
    rng: np.random.Generator,
) -> Tuple[int, str]:
    """
    Sample an option by uncertainty when the weighted state variance is high, else act greedily.

    Returns:
        (option index, "softmax" or "greedy")
    """
    if varsigma * report.state > config.threshold:
        probabilities = softmax_probabilities(report.total)
        return int(rng.choice(N_OPTIONS, p=probabilities)), "softmax"
    legal = state_legal_options(agent, state)
    return agent.greedy_option(state, parameters, legal), "greedy"


def act_greedy(agent: MoecAgent, state: np.ndarray) -> Decision:
    parameters = agent.policy_parameters(state)
    option = agent.greedy_option(state, parameters, state_legal_options(agent, state))
    return Decision(HybridAction.from_parameters(option, parameters), parameters, "greedy")


def act_random(
    agent: MoecAgent,
    state: np.ndarray,
    varsigma: float,
    config: ExploreConfig,
    rng: np.random.Generator,
) -> Decision:
    """
    Gaussian parameter noise and epsilon-greedy options, both scaled by the exploration weight.

    Discrete-only agents keep their fixed parameters.
    """
    parameters = agent.policy_parameters(state)
    low, high = agent.bounds(state)
    if not agent.config.discrete_only:
        noise = rng.normal(size=parameters.shape) * config.noise_scale * varsigma * (high - low)
        parameters = np.clip(parameters + noise, low, high)
    legal = state_legal_options(agent, state)
    if rng.random() < varsigma:
        option, branch = int(rng.choice(np.flatnonzero(legal))), "random"
    else:
        option, branch = agent.greedy_option(state, parameters, legal), "greedy"
    report = uncertainty(agent, state, parameters, with_gradient=False)
    return Decision(HybridAction.from_parameters(option, parameters), parameters, branch, report)


def act(
    agent: MoecAgent,
    state: np.ndarray,
    config: ExploreConfig,
    varsigma: float,
    rng: np.random.Generator,
    mode: str = "explore",
) -> Decision:
    """
    Choose a hybrid action.

    Args:
        agent: Learner
        state: Raw 42-entry observation
        config: Exploration settings; ``source`` picks uncertainty or random exploration
        varsigma: Current exploration weight
        rng: Random stream of this environment
        mode: "explore" during training, "greedy" for evaluation

    Returns:
        The Decision
    """
    if mode not in ACT_MODES:
        raise ConfigError(f"Unknown action mode '{mode}'. Supported: {', '.join(ACT_MODES)}")
    state = np.asarray(state, dtype=float)
    if mode == "greedy":
        return act_greedy(agent, state)
    if config.source == "random":
        return act_random(agent, state, varsigma, config, rng)

    if agent.config.discrete_only:
        parameters = agent.fixed_parameters(state)
    else:
        mu = agent.actor_forward(state)
        guide = uncertainty(agent, state, mu, with_gradient=True)
        low, high = agent.bounds(state)
        candidates = candidate_set(mu, guide.gradient, low, high, config.candidates, varsigma)
        parameters = select_continuous(agent, state, candidates)
    report = uncertainty(agent, state, parameters, with_gradient=False)
    option, branch = select_discrete(agent, state, parameters, report, varsigma, config, rng)
    logger.debug(f"Selected option {option} via {branch} (state variance {report.state:.4g})")
    return Decision(HybridAction.from_parameters(option, parameters), parameters, branch, report)
