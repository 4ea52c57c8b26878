"""
Command line entry point: ``hpa-moec <train|eval|replay|ablate|fixture>``.

Exit codes: 0 ok, 2 configuration, 3 data, 4 runtime.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .agent import MANIFEST_NAME, MoecAgent
from .config import PROFILES, RunConfig
from .exceptions import ConfigError, HpaMoecError
from .highd import SCENARIOS, FixtureSpec, Recording, make_fixture, replay_episode
from .rollout import aggregate_metrics, write_metrics
from .trainer import EVAL_SOURCES, MODES, AgentPolicy, evaluate, run_ablation, train
from .utils import read_key_values

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _load_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.load(
        config_file=args.config,
        overrides=args.override,
        profile=args.profile,
        seed=args.seed,
        out=args.out,
    )


def _checkpoint_mode(checkpoint: Path) -> Optional[str]:
    manifest = Path(checkpoint) / MANIFEST_NAME
    if not manifest.is_file():
        return None
    return read_key_values(manifest).get("mode")


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    experiment = config.experiment()
    output_dir = config.output_dir
    config.snapshot(output_dir)
    for seed in config.seeds:
        result = train(experiment, seed, output_dir / f"seed_{seed}")
        print(f"seed {seed}: {result.steps} steps, {result.episodes} episodes, checkpoint {result.digest[:16]}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    agent = MoecAgent.load(args.checkpoint)
    experiment = config.experiment(_checkpoint_mode(args.checkpoint))
    episodes = experiment.train.eval_episodes if args.episodes is None else args.episodes
    recording = None
    if args.source == "highd":
        if args.data is None:
            raise ConfigError("eval --source highd needs --data")
        recording = Recording.from_directory(args.data, experiment.env.dt, args.recording)
    evaluation = evaluate(
        agent,
        experiment,
        episodes,
        seed=config.seeds[0],
        source=args.source,
        recording=recording,
        workers=experiment.train.workers,
    )
    config.snapshot(config.output_dir)
    write_metrics(evaluation.metrics, evaluation.summary, config.output_dir)
    print(evaluation.summary.table())
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    config = _load_config(args)
    agent = MoecAgent.load(args.checkpoint)
    experiment = config.experiment(_checkpoint_mode(args.checkpoint))
    recording = Recording.from_directory(args.data, experiment.env.dt, args.recording)
    ego_id = args.ego_id
    if ego_id is None:
        eligible = recording.eligible(experiment.train.min_episode_seconds)
        if not eligible:
            raise ConfigError(f"No vehicle in '{recording.name}' is long enough to replay")
        ego_id = int(np.random.default_rng(config.seeds[0]).choice(eligible))
    result = replay_episode(
        recording,
        ego_id,
        AgentPolicy(agent, experiment.controller),
        experiment.env,
        experiment.reward,
        experiment.reward.weights,
        experiment.train.min_episode_seconds,
        experiment.train.lane_change_debounce,
    )
    output_dir = config.output_dir
    config.snapshot(output_dir)
    result.trajectory.write(output_dir / f"replay_{ego_id}.csv")
    summary = aggregate_metrics([result.metrics])
    write_metrics([result.metrics], summary, output_dir)
    print(f"vehicle {ego_id}")
    print(summary.table())
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise ConfigError(f"Unknown ablation modes {unknown or modes}. Supported: {', '.join(MODES)}")
    config.snapshot(config.output_dir)
    frame = run_ablation(config.experiment(), modes, config.seeds, config.output_dir)
    print(frame.to_string(index=False))
    return 0


def cmd_fixture(args: argparse.Namespace) -> int:
    config = _load_config(args)
    spec = FixtureSpec(
        scenario=args.scenario,
        vehicles=args.vehicles,
        duration=args.duration,
        frame_rate=args.frame_rate,
        lane_count=config.get("env.lane_count"),
        lane_width=config.get("env.lane_width"),
        direction=args.direction,
        seed=config.seeds[0],
        recording_id=args.recording,
    )
    files = make_fixture(spec, config.output_dir)
    print(f"{files.tracks}\n{files.meta}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Configuration file layered over the defaults")
    common.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one setting (repeatable)",
    )
    common.add_argument("--seed", type=int, help="Run a single seed instead of trainer.seeds")
    common.add_argument("--out", help="Output directory (HPA_MOEC_OUT takes precedence)")
    common.add_argument("--profile", choices=sorted(PROFILES), help="Named settings profile")
    common.add_argument("--log-level", default="INFO", choices=LOG_LEVELS, help="Logging level")

    parser = argparse.ArgumentParser(
        prog="hpa-moec",
        description="Hybrid-action ensemble-critic highway driving lab",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", parents=[common], help="Train an agent per seed")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint greedily")
    p.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    p.add_argument("--episodes", type=int, help="Episode count (default trainer.eval_episodes)")
    p.add_argument("--source", choices=EVAL_SOURCES, default="simulator")
    p.add_argument("--data", help="Directory with a HighD-format recording")
    p.add_argument("--recording", help="Recording id inside --data")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("replay", parents=[common], help="Drive one recorded vehicle with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    p.add_argument("--data", required=True, help="Directory with a HighD-format recording")
    p.add_argument("--recording", help="Recording id inside --data")
    p.add_argument("--ego-id", type=int, help="Vehicle to substitute (default: seeded random choice)")
    p.set_defaults(handler=cmd_replay)

    p = commands.add_parser("ablate", parents=[common], help="Train several modes on shared seeds")
    p.add_argument("--modes", default=",".join(MODES), help="Comma separated ablation modes")
    p.set_defaults(handler=cmd_ablate)

    p = commands.add_parser("fixture", parents=[common], help="Write a synthetic HighD-format recording")
    p.add_argument("--scenario", choices=SCENARIOS, default="constant")
    p.add_argument("--vehicles", type=int, default=1)
    p.add_argument("--duration", type=float, default=20.0, help="Seconds")
    p.add_argument("--frame-rate", type=float, default=25.0, help="Hz")
    p.add_argument("--direction", choices=("lower", "upper"), default="lower")
    p.add_argument("--recording", default="01", help="Recording id used in the file names")
    p.set_defaults(handler=cmd_fixture)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except HpaMoecError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 4
