"""
Minimal dense-network toolkit.

Multilayer perceptrons with tanh hidden layers and a linear output, reverse-mode
gradients with respect to parameters and inputs, Adam and soft target updates.
Parameters live in one flat float64 vector; layer matrices are views into it.
All functions are pure: they return new parameter and optimizer objects.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import CheckpointError, ConfigError, NumericalError
from .utils import read_key_values, write_key_values

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh",)
DEFAULT_HIDDEN = (256, 256, 256)
BLOB_DTYPE = "<f8"


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes of a dense network."""

    input_dim: int
    output_dim: int
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"All network dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"Unsupported activation '{self.activation}'. "
                f"Supported: {', '.join(ACTIVATIONS)}"
            )

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        sizes = (self.input_dim,) + self.hidden_dims + (self.output_dim,)
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def num_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)


@dataclass
class MlpParams:
    """Flat parameter vector of one network plus its spec."""

    spec: MlpSpec
    vector: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.spec.num_params,):
            raise ConfigError(
                f"Parameter vector has shape {self.vector.shape}, "
                f"spec needs ({self.spec.num_params},)"
            )

    @classmethod
    def initialize(
        cls, spec: MlpSpec, rng: np.random.Generator, seed: Optional[int] = None
    ) -> "MlpParams":
        """
        Draw weights and biases uniformly in +-1/sqrt(fan_in).

        Args:
            spec: Network layout
            rng: Random generator consumed in layer order
            seed: Seed recorded in the checkpoint manifest

        Returns:
            Freshly initialized parameters
        """
        chunks = []
        for fan_in, fan_out in spec.layer_shapes:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(spec, np.concatenate(chunks), seed=seed)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpParams":
        return cls(spec, np.zeros(spec.num_params))

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Return (weight, bias) views; weights are shaped (fan_in, fan_out)."""
        out = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            weight = self.vector[offset : offset + fan_in * fan_out]
            offset += fan_in * fan_out
            bias = self.vector[offset : offset + fan_out]
            offset += fan_out
            out.append((weight.reshape(fan_in, fan_out), bias))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.vector.copy(), seed=self.seed)


@dataclass
class MlpCache:
    """Activations recorded by a forward pass, reused by the backward passes."""

    activations: List[np.ndarray]
    single: bool


@dataclass
class AdamState:
    """Adam moments, step counter and hyperparameters for one network."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), lr, **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(
            self.first_moment.copy(),
            self.second_moment.copy(),
            self.lr,
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
        )


def _as_batch(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.spec.input_dim:
        raise ConfigError(
            f"Network expects input of length {params.spec.input_dim}, "
            f"got shape {x.shape}"
        )
    return batch, single


def forward_with_cache(
    params: MlpParams, x: np.ndarray
) -> Tuple[np.ndarray, MlpCache]:
    """
    Evaluate the network and keep the activations for a backward pass.

    Args:
        params: Network parameters
        x: One input vector or a (batch, input_dim) matrix

    Returns:
        Output with the same leading shape as ``x`` and the activation cache
    """
    hidden, single = _as_batch(params, x)
    activations = [hidden]
    layers = params.layers()
    for index, (weight, bias) in enumerate(layers):
        hidden = hidden @ weight + bias
        if index < len(layers) - 1:
            hidden = np.tanh(hidden)
        activations.append(hidden)
    out = hidden[0] if single else hidden
    return out, MlpCache(activations, single)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    return forward_with_cache(params, x)[0]


def backward(
    params: MlpParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    cache: Optional[MlpCache] = None,
    want_params: bool = True,
) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """
    Back-propagate an output-side gradient.

    Gradients over a batch are summed, so a batch-mean loss must scale
    ``output_grad`` by 1/batch itself.

    Args:
        params: Network parameters
        x: Input the gradient refers to
        output_grad: dLoss/dOutput, same shape as the network output
        cache: Activations from ``forward_with_cache`` on the same input
        want_params: Skip the parameter gradient when False

    Returns:
        (parameter gradient or None, input gradient shaped like ``x``)
    """
    if cache is None:
        _, cache = forward_with_cache(params, x)
    delta = np.asarray(output_grad, dtype=np.float64)
    if cache.single:
        delta = delta[None, :] if delta.ndim == 1 else delta
    expected = cache.activations[-1].shape
    if delta.shape != expected:
        raise ConfigError(
            f"Output gradient has shape {np.shape(output_grad)}, "
            f"network output is {expected}"
        )

    layers = params.layers()
    grads = np.empty(params.spec.num_params) if want_params else None
    offset = params.spec.num_params
    for index in range(len(layers) - 1, -1, -1):
        weight, bias = layers[index]
        if grads is not None:
            offset -= bias.size
            grads[offset : offset + bias.size] = delta.sum(axis=0)
            offset -= weight.size
            grads[offset : offset + weight.size] = (
                cache.activations[index].T @ delta
            ).ravel()
        delta = delta @ weight.T
        if index > 0:
            delta = delta * (1.0 - cache.activations[index] ** 2)

    input_grad = delta[0] if cache.single else delta
    return grads, input_grad


def backward_params(
    params: MlpParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    cache: Optional[MlpCache] = None,
) -> np.ndarray:
    """Gradient of the loss with respect to every parameter (flat vector)."""
    grads, _ = backward(params, x, output_grad, cache)
    return grads


def backward_input(
    params: MlpParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    cache: Optional[MlpCache] = None,
) -> np.ndarray:
    """Gradient of the loss with respect to the network input."""
    _, input_grad = backward(params, x, output_grad, cache, want_params=False)
    return input_grad


def adam_step(
    params: MlpParams, grads: np.ndarray, state: AdamState
) -> Tuple[MlpParams, AdamState]:
    """
    Apply one bias-corrected Adam update.

    Args:
        params: Current parameters
        grads: Flat gradient vector
        state: Optimizer state for these parameters

    Returns:
        Updated parameters and optimizer state

    Raises:
        ConfigError: If shapes do not match
        NumericalError: If the gradient contains non-finite values
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.vector.shape or grads.shape != state.first_moment.shape:
        raise ConfigError(
            f"Gradient shape {grads.shape} does not match parameters "
            f"{params.vector.shape}"
        )
    finite = np.isfinite(grads)
    if not finite.all():
        bad = int((~finite).sum())
        largest = float(np.max(np.abs(grads[finite]))) if finite.any() else float("nan")
        raise NumericalError(
            f"Rejected Adam step {state.step + 1}: {bad} non-finite gradient "
            f"entries (largest finite magnitude {largest:.3e})"
        )

    step = state.step + 1
    first = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    second = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads**2
    first_hat = first / (1.0 - state.beta1**step)
    second_hat = second / (1.0 - state.beta2**step)
    vector = params.vector - state.lr * first_hat / (np.sqrt(second_hat) + state.eps)

    new_state = AdamState(
        first, second, state.lr, step, state.beta1, state.beta2, state.eps
    )
    return MlpParams(params.spec, vector, seed=params.seed), new_state


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """
    Blend target parameters toward online ones: tau*online + (1-tau)*target.

    Raises:
        ConfigError: If the specs differ or tau is outside (0, 1]
    """
    if target.spec != online.spec:
        raise ConfigError("soft_update needs networks with identical specs")
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    if tau == 1.0:
        vector = online.vector.copy()
    else:
        vector = tau * online.vector + (1.0 - tau) * target.vector
    return MlpParams(target.spec, vector, seed=target.seed)


def manifest_path(stem: Union[str, Path]) -> Path:
    return Path(f"{stem}.manifest")


def blob_path(stem: Union[str, Path]) -> Path:
    return Path(f"{stem}.bin")


def save_params(params: MlpParams, stem: Union[str, Path]) -> Path:
    """
    Write ``<stem>.manifest`` and the little-endian float64 ``<stem>.bin`` blob.

    Returns:
        Path of the manifest
    """
    spec = params.spec
    manifest = {
        "input_dim": spec.input_dim,
        "output_dim": spec.output_dim,
        "hidden_dims": list(spec.hidden_dims),
        "activation": spec.activation,
        "layer_shapes": ";".join(f"{i}x{o}" for i, o in spec.layer_shapes),
        "num_params": spec.num_params,
        "dtype": BLOB_DTYPE,
        "seed": "" if params.seed is None else params.seed,
    }
    path = write_key_values(manifest_path(stem), manifest, header="mlp checkpoint")
    params.vector.astype(BLOB_DTYPE).tofile(blob_path(stem))
    logger.debug(f"Saved {spec.num_params} parameters to {blob_path(stem)}")
    return path


def load_params(stem: Union[str, Path]) -> MlpParams:
    """
    Read parameters written by ``save_params``.

    Raises:
        CheckpointError: If files are missing or disagree with the manifest
    """
    try:
        manifest = read_key_values(manifest_path(stem))
    except ConfigError as e:
        raise CheckpointError(f"Checkpoint manifest missing: {e}")
    try:
        hidden = _parse_ints(manifest.get("hidden_dims", ""))
        spec = MlpSpec(
            input_dim=int(manifest["input_dim"]),
            output_dim=int(manifest["output_dim"]),
            hidden_dims=tuple(hidden),
            activation=manifest.get("activation", "tanh"),
        )
        declared = int(manifest["num_params"])
    except (KeyError, ValueError, ConfigError) as e:
        raise CheckpointError(f"Corrupt checkpoint manifest {manifest_path(stem)}: {e}")

    expected_shapes = ";".join(f"{i}x{o}" for i, o in spec.layer_shapes)
    if declared != spec.num_params or manifest.get("layer_shapes") != expected_shapes:
        raise CheckpointError(
            f"Checkpoint {manifest_path(stem)} layer shapes do not match its spec"
        )
    blob = blob_path(stem)
    if not blob.is_file():
        raise CheckpointError(f"Checkpoint blob missing: {blob}")
    vector = np.fromfile(blob, dtype=manifest.get("dtype", BLOB_DTYPE))
    if vector.shape != (declared,):
        raise CheckpointError(
            f"Checkpoint blob {blob} holds {vector.size} values, expected {declared}"
        )
    seed = manifest.get("seed", "")
    return MlpParams(
        spec, vector.astype(np.float64), seed=int(seed) if seed else None
    )


def _parse_ints(text: str) -> Sequence[int]:
    return [int(item) for item in text.split(",") if item.strip()]
