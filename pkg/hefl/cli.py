# The MIT License (MIT)
# Copyright © 2024 hefl developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.

"""
Command-line entry point.

    hefl train  [--config FILE] [--section.key VALUE ...]
    hefl attack RUN_DIR [--attack.rounds 40 41] [...]
    hefl report RUN_DIR [RUN_DIR ...] [--output_dir DIR]

Each command prints the directory it wrote to stdout. Failures print a
one-line JSON error record to stderr, also saved as ``error.json`` in the
output root, and exit with 2 for configuration errors and 1 otherwise.
"""

import argparse
import json
import os
import sys
from typing import List, Optional

from loguru import logger

from hefl.config import ExperimentConfig, RunConfig
from hefl.errors import ConfigError
from hefl.lib.attack import AttackRunner
from hefl.lib.config import OUTPUT_ROOT_ENV, add_args, get_config
from hefl.lib.report import ReportRunner
from hefl.lib.train import TrainRunner

ERROR_FILE = "error.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hefl", description="Federated learning with interleaved rounds and selective encryption.")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Run every repetition of an experiment.")
    add_args(train)

    attack = commands.add_parser("attack", help="Attack saved rounds of a finished run.")
    attack.add_argument("run_dir", type=str, help="Run directory written by train.")
    add_args(attack)

    report = commands.add_parser("report", help="Compare finished runs against the baseline run.")
    report.add_argument("run_dirs", type=str, nargs="+", help="Run directories written by train.")
    report.add_argument("--output_dir", type=str, default=None, help="Where to write the report directory.")
    add_args(report)
    return parser


def _output_root(config: Optional[ExperimentConfig]) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV) or (config.run.output_dir if config else RunConfig().output_dir)
    return os.path.expanduser(root)


def _fail(command: str, error: Exception, config: Optional[ExperimentConfig]) -> int:
    logger.opt(exception=error).error(f"{command} failed: {error}")
    record = {"error": type(error).__name__, "message": str(error), "command": command}
    line = json.dumps(record)
    print(line, file=sys.stderr)
    try:
        root = _output_root(config)
        os.makedirs(root, exist_ok=True)
        with open(os.path.join(root, ERROR_FILE), "w") as f:
            f.write(line + "\n")
    except OSError as e:
        logger.warning(f"Could not write {ERROR_FILE}: {e}")
    return 2 if isinstance(error, ConfigError) else 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = None
    try:
        config = get_config(args)
        if args.command == "train":
            runner = TrainRunner(config)
        elif args.command == "attack":
            runner = AttackRunner(args.run_dir, config)
        else:
            runner = ReportRunner(args.run_dirs, args.output_dir, config)
        with runner:
            out_dir = runner.run()
    except Exception as e:
        return _fail(args.command, e, config)
    print(out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
