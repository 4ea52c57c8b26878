"""
Tests for hpa_moec.cli.
"""
import io
import shutil
import tempfile
from contextlib import redirect_stdout
from pathlib import Path
from unittest import TestCase
from unittest.mock import patch

from hpa_moec.cli import build_parser, main
from hpa_moec.rollout import EMPTY_MARKER, aggregate_metrics
from hpa_moec.trainer import Evaluation

TINY = [
    "trainer.total_steps=30",
    "trainer.warmup=8",
    "trainer.checkpoint_every=0",
    "agent.batch_size=4",
    "agent.hidden_dims=8",
    "agent.ensemble_size=2",
    "explore.candidates=3",
    "env.episode_seconds=2",
    "env.density=0.1",
]


def overrides(*extra: str):
    args = []
    for item in TINY + list(extra):
        args += ["--override", item]
    return args


def run(argv):
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(argv)
    return code, out.getvalue()


class ParserTest(TestCase):
    """Test the argument parser."""

    def test_common_options_on_every_command(self):
        """Test shared options parse after each subcommand."""
        parser = build_parser()
        args = parser.parse_args(["ablate", "--seed", "3", "--override", "a.b=1", "--profile", "desk"])
        self.assertEqual((args.seed, args.override, args.profile), (3, ["a.b=1"], "desk"))
        self.assertEqual(parser.parse_args(["fixture"]).scenario, "constant")

    def test_version(self):
        """Test --version exits cleanly."""
        with redirect_stdout(io.StringIO()):
            with self.assertRaises(SystemExit) as raised:
                main(["--version"])
        self.assertEqual(raised.exception.code, 0)


class CommandTest(TestCase):
    """Test the commands end to end on a tiny run."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = Path(tempfile.mkdtemp())
        cls.data = cls.tmp / "data"
        code, cls.train_output = run(["train", "--seed", "0", "--out", str(cls.tmp / "train")] + overrides())
        assert code == 0, cls.train_output
        cls.checkpoint = cls.tmp / "train" / "seed_0" / "checkpoint"
        run(["fixture", "--out", str(cls.data), "--scenario", "platoon", "--vehicles", "3"])

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def test_train_outputs(self):
        """Test training writes a snapshot, traces and a checkpoint."""
        self.assertIn("seed 0: 30 steps", self.train_output)
        self.assertTrue((self.tmp / "train" / "resolved.cfg").is_file())
        self.assertTrue((self.tmp / "train" / "seed_0" / "train.csv").is_file())
        self.assertTrue((self.checkpoint / "agent.manifest").is_file())
        self.assertIn("trainer.total_steps=30", (self.tmp / "train" / "resolved.cfg").read_text())

    def test_fixture(self):
        """Test the fixture command writes both recording files."""
        self.assertTrue((self.data / "01_tracks.csv").is_file())
        self.assertTrue((self.data / "01_recordingMeta.txt").is_file())

    def test_eval_simulator(self):
        """Test simulator evaluation writes metrics and prints the summary."""
        out = self.tmp / "eval"
        code, output = run(["eval", "--checkpoint", str(self.checkpoint), "--episodes", "2", "--out", str(out)] + overrides())
        self.assertEqual(code, 0)
        self.assertEqual(output.split()[:6], ["AR", "AS", "NL", "VS", "VA", "CR"])
        self.assertTrue((out / "metrics.csv").is_file())
        self.assertTrue((out / "resolved.cfg").is_file())

    def test_eval_zero_episodes(self):
        """Test zero episodes print the empty marker and succeed."""
        out = self.tmp / "eval_empty"
        code, output = run(["eval", "--checkpoint", str(self.checkpoint), "--episodes", "0", "--out", str(out)] + overrides())
        self.assertEqual(code, 0)
        self.assertEqual(output.strip(), EMPTY_MARKER)

    def test_eval_highd(self):
        """Test evaluation on a HighD-format recording."""
        out = self.tmp / "eval_highd"
        argv = ["eval", "--checkpoint", str(self.checkpoint), "--episodes", "1", "--source", "highd"]
        code, _ = run(argv + ["--data", str(self.data), "--out", str(out)] + overrides())
        self.assertEqual(code, 0)
        self.assertTrue((out / "metrics.csv").is_file())

    def test_replay(self):
        """Test replaying one recorded vehicle writes its trajectory."""
        out = self.tmp / "replay"
        argv = ["replay", "--checkpoint", str(self.checkpoint), "--data", str(self.data), "--ego-id", "2"]
        code, output = run(argv + ["--out", str(out)] + overrides())
        self.assertEqual(code, 0)
        self.assertIn("vehicle 2", output)
        self.assertTrue((out / "replay_2.csv").is_file())

    def test_replay_unknown_vehicle(self):
        """Test an unknown vehicle is a data error."""
        argv = ["replay", "--checkpoint", str(self.checkpoint), "--data", str(self.data), "--ego-id", "99"]
        code, _ = run(argv + ["--out", str(self.tmp / "replay_missing")] + overrides())
        self.assertEqual(code, 3)

    def test_eval_uses_checkpoint_mode(self):
        """Test evaluation applies the ablation mode stored with the checkpoint."""
        out = self.tmp / "da_mo"
        run(["train", "--seed", "0", "--out", str(out)] + overrides("trainer.mode=da_mo", "trainer.total_steps=10"))
        empty = Evaluation([], aggregate_metrics([]))
        with patch("hpa_moec.cli.evaluate", return_value=empty) as evaluate:
            code, _ = run(["eval", "--checkpoint", str(out / "seed_0" / "checkpoint"), "--out", str(out / "eval")] + overrides())
        self.assertEqual(code, 0)
        experiment = evaluate.call_args[0][1]
        self.assertEqual(experiment.controller.lateral, "pid")
        self.assertTrue(experiment.agent.discrete_only)


class ErrorCodeTest(TestCase):
    """Test exit codes."""

    def test_missing_config_file(self):
        """Test a missing config file exits 2 and names the path."""
        with self.assertLogs("hpa_moec.cli", level="ERROR") as logs:
            code, _ = run(["train", "--config", "/nonexistent/run.cfg"])
        self.assertEqual(code, 2)
        self.assertIn("/nonexistent/run.cfg", "\n".join(logs.output))

    def test_unknown_key(self):
        """Test an unknown override key exits 2."""
        code, _ = run(["train", "--override", "trainer.steps=5"])
        self.assertEqual(code, 2)

    def test_unknown_ablation_mode(self):
        """Test an unknown ablation mode exits 2 before training."""
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = run(["ablate", "--modes", "full,dqn", "--out", tmp])
        self.assertEqual(code, 2)

    def test_missing_checkpoint(self):
        """Test evaluating a missing checkpoint exits 3."""
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = run(["eval", "--checkpoint", str(Path(tmp) / "none"), "--out", tmp])
        self.assertEqual(code, 3)

    def test_highd_without_data(self):
        """Test HighD evaluation without --data exits 2."""
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = run(["fixture", "--out", tmp])
            self.assertEqual(code, 0)
            train_code, _ = run(["train", "--seed", "0", "--out", tmp] + overrides("trainer.total_steps=0"))
            self.assertEqual(train_code, 0)
            checkpoint = str(Path(tmp) / "seed_0" / "checkpoint")
            code, _ = run(["eval", "--checkpoint", checkpoint, "--source", "highd", "--out", tmp] + overrides())
        self.assertEqual(code, 2)
