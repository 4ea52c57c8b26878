"""
Tests for hpa_moec.nn.
"""
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from hpa_moec.exceptions import CheckpointError, ConfigError, NumericalError
from hpa_moec.nn import (
    AdamState,
    MlpParams,
    MlpSpec,
    adam_step,
    backward_input,
    backward_params,
    forward,
    load_params,
    save_params,
    soft_update,
)


def linear(weight: float, bias: float = 0.0) -> MlpParams:
    return MlpParams(MlpSpec(1, 1, hidden_dims=()), np.array([weight, bias]))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


class MlpSpecTest(TestCase):
    """Test network layouts."""

    def test_default_hidden_layers(self):
        """Test three hidden layers of 256 units by default."""
        spec = MlpSpec(4, 2)
        self.assertEqual(spec.hidden_dims, (256, 256, 256))
        self.assertEqual(spec.layer_shapes, [(4, 256), (256, 256), (256, 256), (256, 2)])

    def test_invalid_dimensions(self):
        """Test zero-sized layers are rejected."""
        with self.assertRaises(ConfigError):
            MlpSpec(0, 1)
        with self.assertRaises(ConfigError):
            MlpSpec(2, 1, hidden_dims=(3, 0))
        with self.assertRaises(ConfigError):
            MlpSpec(2, 1, activation="relu")

    def test_vector_shape_checked(self):
        """Test parameter vectors must match the spec."""
        with self.assertRaises(ConfigError):
            MlpParams(MlpSpec(2, 1, hidden_dims=(3,)), np.zeros(5))


class ForwardTest(TestCase):
    """Test forward evaluation."""

    def test_zero_network(self):
        """Test a zero network outputs zeros."""
        params = MlpParams.zeros(MlpSpec(3, 2, hidden_dims=(4,)))
        np.testing.assert_array_equal(forward(params, np.array([1.0, -2.0, 3.0])), np.zeros(2))

    def test_identity(self):
        """Test a one-layer identity net."""
        np.testing.assert_array_equal(forward(linear(1.0), np.array([0.5])), np.array([0.5]))

    def test_matches_hand_rolled_chain(self):
        """Test a random 2-3-1 net against a straight-line affine+tanh oracle."""
        spec = MlpSpec(2, 1, hidden_dims=(3,))
        params = MlpParams.initialize(spec, np.random.default_rng(0))
        v = params.vector
        w1, b1 = v[:6].reshape(2, 3), v[6:9]
        w2, b2 = v[9:12].reshape(3, 1), v[12:13]
        x = np.array([0.3, -0.7])
        expected = np.tanh(x @ w1 + b1) @ w2 + b2
        np.testing.assert_allclose(forward(params, x), expected, rtol=0, atol=1e-12)

    def test_batch_matches_rows(self):
        """Test batched evaluation equals row-by-row evaluation."""
        params = MlpParams.initialize(MlpSpec(3, 2, hidden_dims=(5, 4)), np.random.default_rng(1))
        batch = np.random.default_rng(2).normal(size=(4, 3))
        out = forward(params, batch)
        for row, expected in zip(batch, out):
            np.testing.assert_allclose(forward(params, row), expected, atol=1e-12)

    def test_dimension_mismatch(self):
        """Test a wrong input length is a configuration error."""
        with self.assertRaises(ConfigError):
            forward(linear(1.0), np.array([1.0, 2.0]))

    def test_deterministic_initialization(self):
        """Test identical seeds give identical parameters."""
        spec = MlpSpec(3, 2, hidden_dims=(8,))
        a = MlpParams.initialize(spec, np.random.default_rng(5))
        b = MlpParams.initialize(spec, np.random.default_rng(5))
        np.testing.assert_array_equal(a.vector, b.vector)
        bound = 1.0 / np.sqrt(3)
        self.assertTrue(np.all(np.abs(a.vector[:24]) <= bound))


class BackwardTest(TestCase):
    """Test reverse-mode gradients."""

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_zero_output_grad(self):
        """Test zero output gradients give zero gradients."""
        params = MlpParams.initialize(MlpSpec(3, 2, hidden_dims=(4,)), self.rng)
        x = np.ones(3)
        np.testing.assert_array_equal(backward_params(params, x, np.zeros(2)), np.zeros(params.spec.num_params))
        np.testing.assert_array_equal(backward_input(params, x, np.zeros(2)), np.zeros(3))

    def test_hand_chain_rule(self):
        """Test d(wx)/dw = x and d(3x)/dx = 3."""
        grads = backward_params(linear(1.0), np.array([2.0]), np.array([1.0]))
        self.assertAlmostEqual(grads[0], 2.0)
        self.assertAlmostEqual(grads[1], 1.0)
        self.assertAlmostEqual(backward_input(linear(3.0), np.array([0.4]), np.array([1.0]))[0], 3.0)

    def test_finite_differences(self):
        """Test both gradients against central differences on random layouts."""
        h = 1e-5
        for _ in range(100):
            depth = int(self.rng.integers(1, 5))
            hidden = tuple(int(n) for n in self.rng.integers(1, 33, size=depth))
            spec = MlpSpec(int(self.rng.integers(1, 9)), int(self.rng.integers(1, 5)), hidden_dims=hidden)
            params = MlpParams.initialize(spec, self.rng)
            x = self.rng.normal(size=spec.input_dim)
            g = self.rng.normal(size=spec.output_dim)

            def loss(vector, inputs):
                return float(g @ forward(MlpParams(spec, vector), inputs))

            indices = self.rng.choice(spec.num_params, size=min(40, spec.num_params), replace=False)
            numeric = np.empty(len(indices))
            for k, index in enumerate(indices):
                step = np.zeros(spec.num_params)
                step[index] = h
                numeric[k] = (loss(params.vector + step, x) - loss(params.vector - step, x)) / (2 * h)
            analytic = backward_params(params, x, g)[indices]
            self.assertLess(relative_error(analytic, numeric), 1e-4, f"params, hidden={hidden}")

            numeric_x = np.array(
                [(loss(params.vector, x + h * e) - loss(params.vector, x - h * e)) / (2 * h) for e in np.eye(len(x))]
            )
            self.assertLess(relative_error(backward_input(params, x, g), numeric_x), 1e-4, f"input, hidden={hidden}")

    def test_batch_gradients_are_summed(self):
        """Test a batch gradient equals the sum of per-row gradients."""
        params = MlpParams.initialize(MlpSpec(2, 1, hidden_dims=(3,)), self.rng)
        batch = self.rng.normal(size=(3, 2))
        total = backward_params(params, batch, np.ones((3, 1)))
        rows = sum(backward_params(params, row, np.ones(1)) for row in batch)
        np.testing.assert_allclose(total, rows, atol=1e-12)

    def test_output_grad_shape_checked(self):
        """Test a wrong output gradient shape is rejected."""
        with self.assertRaises(ConfigError):
            backward_params(linear(1.0), np.array([1.0]), np.array([1.0, 2.0]))


class AdamTest(TestCase):
    """Test the Adam optimizer."""

    def test_zero_gradient(self):
        """Test zero gradients leave parameters unchanged and count the step."""
        params = linear(0.5, 0.1)
        new, state = adam_step(params, np.zeros(2), AdamState.zeros(2, lr=0.01))
        np.testing.assert_array_equal(new.vector, params.vector)
        self.assertEqual(state.step, 1)

    def test_first_step_moves_by_lr(self):
        """Test the bias-corrected first step moves by about lr."""
        params = linear(0.0, 0.0)
        new, _ = adam_step(params, np.array([1.0, 0.0]), AdamState.zeros(2, lr=0.01))
        self.assertAlmostEqual(new.vector[0], -0.01, places=6)

    def test_repeated_gradient_monotone(self):
        """Test two identical gradients keep moving against the gradient."""
        params = linear(0.0, 0.0)
        state = AdamState.zeros(2, lr=0.01)
        first, state = adam_step(params, np.array([1.0, 0.0]), state)
        second, state = adam_step(first, np.array([1.0, 0.0]), state)
        self.assertLess(second.vector[0], first.vector[0])
        self.assertLess(first.vector[0], 0.0)
        self.assertEqual(state.step, 2)

    def test_non_finite_gradient_rejected(self):
        """Test NaN gradients raise NumericalError and leave the state alone."""
        state = AdamState.zeros(2, lr=0.01)
        with self.assertRaises(NumericalError) as ctx:
            adam_step(linear(1.0), np.array([np.nan, 1.0]), state)
        self.assertIn("non-finite", str(ctx.exception))
        self.assertEqual(state.step, 0)


class SoftUpdateTest(TestCase):
    """Test target network blending."""

    def test_tau_one_copies(self):
        """Test tau = 1 copies the online network."""
        target = soft_update(linear(0.0), linear(2.0, 1.0), 1.0)
        np.testing.assert_array_equal(target.vector, [2.0, 1.0])

    def test_small_tau(self):
        """Test a blend with the default rate."""
        target = soft_update(linear(0.0, 0.0), linear(1.0, 1.0), 0.005)
        np.testing.assert_allclose(target.vector, [0.005, 0.005])

    def test_fixed_point_and_contraction(self):
        """Test identical networks stay put and distances shrink by 1 - tau."""
        same = soft_update(linear(0.7, 0.2), linear(0.7, 0.2), 0.3)
        np.testing.assert_allclose(same.vector, [0.7, 0.2])
        online, target = linear(1.0, -1.0), linear(-3.0, 5.0)
        new = soft_update(target, online, 0.25)
        self.assertTrue(np.all(np.abs(new.vector - online.vector) <= 0.75 * np.abs(target.vector - online.vector) + 1e-15))

    def test_invalid_tau(self):
        """Test tau outside (0, 1] is rejected."""
        with self.assertRaises(ConfigError):
            soft_update(linear(0.0), linear(1.0), 0.0)
        with self.assertRaises(ConfigError):
            soft_update(MlpParams.zeros(MlpSpec(2, 1, hidden_dims=())), linear(1.0), 0.5)


class CheckpointTest(TestCase):
    """Test parameter files."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.stem = Path(self.tmp.name) / "net"

    def test_bit_exact_reload(self):
        """Test saved parameters reload bit-exactly with their seed."""
        params = MlpParams.initialize(MlpSpec(4, 3, hidden_dims=(5, 5)), np.random.default_rng(3), seed=3)
        save_params(params, self.stem)
        loaded = load_params(self.stem)
        self.assertEqual(loaded.spec, params.spec)
        self.assertEqual(loaded.seed, 3)
        self.assertEqual(loaded.vector.tobytes(), params.vector.tobytes())

    def test_truncated_blob(self):
        """Test a short blob is a checkpoint error."""
        save_params(MlpParams.zeros(MlpSpec(2, 2, hidden_dims=(3,))), self.stem)
        Path(f"{self.stem}.bin").write_bytes(b"\x00" * 16)
        with self.assertRaises(CheckpointError):
            load_params(self.stem)

    def test_missing_manifest(self):
        """Test a missing manifest is a checkpoint error."""
        with self.assertRaises(CheckpointError):
            load_params(self.stem)
