"""
Tests for hpa_moec.utils and the exception hierarchy.
"""
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from hpa_moec.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    HpaMoecError,
    NumericalError,
    SchemaError,
    SelectionError,
    SimulationFault,
)
from hpa_moec.utils import (
    file_sha256,
    format_value,
    quartiles,
    read_key_values,
    require_keys,
    spawn_seeds,
    text_sha256,
    write_key_values,
)


class KeyValueFileTest(TestCase):
    """Test flat key=value files."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_write_then_read(self):
        """Test values written by write_key_values are read back as text."""
        path = write_key_values(
            self.dir / "a.cfg",
            {"env.lane_count": 3, "reward.weights": (0.4, 0.6), "env.mobil_enabled": False},
            header="generated",
        )
        values = read_key_values(path)
        self.assertEqual(values["env.lane_count"], "3")
        self.assertEqual(values["reward.weights"], "0.4,0.6")
        self.assertEqual(values["env.mobil_enabled"], "false")
        self.assertTrue(path.read_text().startswith("# generated"))

    def test_comments_and_blank_lines_ignored(self):
        """Test comment lines and blank lines are skipped."""
        path = self.dir / "b.cfg"
        path.write_text("# comment\n\nenv.dt = 0.1\n")
        self.assertEqual(read_key_values(path), {"env.dt": "0.1"})

    def test_missing_file(self):
        """Test a missing file raises ConfigError naming the path."""
        with self.assertRaises(ConfigError) as ctx:
            read_key_values(self.dir / "absent.cfg")
        self.assertIn("absent.cfg", str(ctx.exception))

    def test_file_digest_matches_text_digest(self):
        """Test file and text digests agree."""
        path = self.dir / "c.txt"
        path.write_text("abc", encoding="utf-8")
        self.assertEqual(file_sha256(path), text_sha256("abc"))


class HelperTest(TestCase):
    """Test small helpers."""

    def test_format_value(self):
        """Test config spelling of values."""
        self.assertEqual(format_value(True), "true")
        self.assertEqual(format_value(0.1), "0.1")
        self.assertEqual(format_value([64, 64]), "64,64")
        self.assertEqual(format_value("full"), "full")

    def test_spawn_seeds_deterministic(self):
        """Test child seeds depend only on the root seed."""
        self.assertEqual(spawn_seeds(7, 4), spawn_seeds(7, 4))
        self.assertNotEqual(spawn_seeds(7, 4), spawn_seeds(8, 4))
        self.assertEqual(len(set(spawn_seeds(7, 4))), 4)

    def test_quartiles(self):
        """Test boxplot statistics."""
        stats = quartiles([1.0, 2.0, 3.0, 4.0, 5.0])
        self.assertEqual(stats, {"min": 1.0, "q1": 2.0, "median": 3.0, "q3": 4.0, "max": 5.0})
        self.assertEqual(quartiles([]), {})

    def test_require_keys(self):
        """Test missing keys are all named."""
        with self.assertRaises(SchemaError) as ctx:
            require_keys({"a": 1}, ["a", "b", "c"], "meta", error=SchemaError)
        self.assertIn("b, c", str(ctx.exception))
        require_keys({"a": 1}, ["a"], "meta")


class ExceptionTest(TestCase):
    """Test exit codes of the error hierarchy."""

    def test_exit_codes(self):
        """Test each error family maps to its exit code."""
        self.assertEqual(ConfigError("x").exit_code, 2)
        for error in (DataError, SchemaError, SelectionError, CheckpointError):
            self.assertEqual(error("x").exit_code, 3)
            self.assertIsInstance(error("x"), HpaMoecError)
        self.assertEqual(NumericalError("x").exit_code, 4)
        self.assertEqual(SimulationFault("x").exit_code, 4)

    def test_simulation_fault_state(self):
        """Test the state dump travels with the fault."""
        fault = SimulationFault("bad steer", {"steer": np.nan})
        self.assertIn("steer", fault.state)
        self.assertEqual(SimulationFault("x").state, {})
