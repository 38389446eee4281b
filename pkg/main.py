"""
NavThinker command line

    python main.py <command> --config run.json [--out DIR] [--seed N]

Commands: collect, train-wm, train-policy, eval, ablate, ablate-wm,
baseline, stats. Exit code 0 on success, 2 on a config error, 3 when a
prerequisite file (replay, checkpoint) is missing, 1 otherwise.
"""

import argparse
import sys
import traceback
from typing import List, Optional

from pydantic import ValidationError

from config import ConfigError, RunConfig, load_config
from pipeline import (MissingPrerequisiteError, cmd_ablate, cmd_ablate_wm, cmd_baseline_greedy, cmd_collect,
                      cmd_eval, cmd_stats, cmd_train_policy, cmd_train_wm, prepare_run_dir)

COMMANDS = ["collect", "train-wm", "train-policy", "eval", "ablate", "ablate-wm", "baseline", "stats"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navthinker",
                                     description="Latent world model + imagination-augmented PPO for social navigation")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run config (defaults for every missing key)")
    parser.add_argument("--out", help="output directory, overrides out_dir")
    parser.add_argument("--seed", type=int, help="master seed, overrides seed")
    parser.add_argument("--run-name", help="run directory name (default <command>-<timestamp>)")
    parser.add_argument("--replay", help="replay file (train-wm, train-policy, stats)")
    parser.add_argument("--wm-checkpoint", help="world model checkpoint (train-policy, eval)")
    parser.add_argument("--checkpoint", help="policy checkpoint (eval)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        # re-validate so overrides go through the same range checks
        config = RunConfig.model_validate({**config.model_dump(), **overrides})
    return config


def run(args: argparse.Namespace):
    config = resolve_config(args)
    if args.command == "stats":
        return cmd_stats(args.replay, config)

    run_dir = prepare_run_dir(config, args.command, args.run_name)
    print(f"[INFO] Run directory: {run_dir}")
    if args.command == "collect":
        return cmd_collect(config, run_dir)
    if args.command == "train-wm":
        return cmd_train_wm(config, run_dir, replay_path=args.replay)
    if args.command == "train-policy":
        return cmd_train_policy(config, run_dir, wm_checkpoint=args.wm_checkpoint, replay_path=args.replay)
    if args.command == "eval":
        return cmd_eval(config, run_dir, checkpoint=args.checkpoint, wm_checkpoint=args.wm_checkpoint)
    if args.command == "ablate":
        return cmd_ablate(config, run_dir)
    if args.command == "ablate-wm":
        return cmd_ablate_wm(config, run_dir)
    return cmd_baseline_greedy(config, run_dir)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
        return EXIT_OK
    except (ConfigError, ValidationError) as e:
        print(f"\n[ERROR] Config error: {e}")
        return EXIT_CONFIG
    except MissingPrerequisiteError as e:
        print(f"\n[ERROR] Missing prerequisite: {e}")
        return EXIT_MISSING
    except KeyboardInterrupt:
        print("\n\nRun interrupted by user")
        return EXIT_FAILURE
    except Exception as e:
        print(f"\n[ERROR] Unexpected error: {e}")
        traceback.print_exc()
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
