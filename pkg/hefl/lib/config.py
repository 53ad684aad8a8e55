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

import os
import argparse
from typing import Any, Dict, Optional

import munch
import pydantic
import yaml
from loguru import logger

from hefl.config import ExperimentConfig
from hefl.errors import ConfigError

OUTPUT_ROOT_ENV = "HEFL_OUTPUT_ROOT"


def check_config(config: ExperimentConfig) -> ExperimentConfig:
    """
    Validates the resolved configuration against the environment and prepares
    the directories a run writes to.

    The output root is taken from ``$HEFL_OUTPUT_ROOT`` when it is set, then
    ``~`` is expanded. Output and logging directories are created if missing.

    Args:
        config (ExperimentConfig): The parsed configuration.

    Returns:
        ExperimentConfig: The same configuration with resolved paths.

    Raises:
        ConfigError: When the dataset directory is missing or the schedule,
            stopping or attack settings are inconsistent.
    """
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        config.run.output_dir = root
    config.run.output_dir = os.path.expanduser(config.run.output_dir)
    config.logging.logging_dir = os.path.expanduser(config.logging.logging_dir)

    if config.data.source == "cifar10":
        if not config.data.cifar10_dir:
            raise ConfigError("data.cifar10_dir is required when data.source is cifar10")
        config.data.cifar10_dir = os.path.expanduser(config.data.cifar10_dir)
        if not os.path.isdir(config.data.cifar10_dir):
            raise ConfigError(f"CIFAR-10 directory not found: {config.data.cifar10_dir}")
    if config.stopping.mode == "convergence" and config.stopping.max_rounds < config.stopping.window:
        raise ConfigError("stopping.max_rounds must be at least stopping.window")
    rounds = config.stopping.rounds if config.stopping.mode == "fixed" else config.stopping.max_rounds
    late = [t for t in config.run.trace_rounds + config.run.snapshot_rounds if t < 0 or t >= rounds]
    if late:
        raise ConfigError(f"trace/snapshot rounds {late} fall outside the {rounds} rounds of the run")

    for directory in (config.run.output_dir, config.logging.logging_dir):
        if not os.path.exists(directory):
            os.makedirs(directory)
    return config


def add_args(parser: argparse.ArgumentParser):
    """
    Adds the dotted ``--section.key`` flags of every configuration section.

    All flags default to ``None`` so that only flags given on the command line
    override values loaded from ``--config``.
    """
    parser.add_argument("--config", type=str, default=None, help="YAML file with one mapping per section.")

    # Data.
    parser.add_argument("--data.source", type=str, choices=["toy", "cifar10"], default=None, help="Dataset to use.")
    parser.add_argument("--data.cifar10_dir", type=str, default=None, help="Directory of CIFAR-10 binary batches.")
    parser.add_argument("--data.toy_classes", type=int, default=None, help="Classes of the toy task.")
    parser.add_argument("--data.toy_per_class", type=int, default=None, help="Toy training samples per class.")
    parser.add_argument("--data.toy_test_per_class", type=int, default=None, help="Toy test samples per class.")
    parser.add_argument("--data.toy_size", type=int, default=None, help="Side of the toy images (>= 8).")
    parser.add_argument("--data.toy_channels", type=int, default=None, help="Channels of the toy images.")
    parser.add_argument("--data.toy_noise", type=float, default=None, help="Pixel noise of the toy images.")

    # Federation.
    parser.add_argument("--federation.num_clients", type=int, default=None, help="Number of clients.")
    parser.add_argument("--federation.alpha", type=float, default=None, help="Dirichlet concentration.")

    # Model.
    parser.add_argument("--model.name", type=str, choices=["mlp", "lenet_lite"], default=None, help="Model preset.")
    parser.add_argument("--model.hidden", type=int, nargs="*", default=None, help="Dense hidden widths.")
    parser.add_argument("--model.activation", type=str, choices=["sigmoid", "tanh", "relu"], default=None)
    parser.add_argument("--model.kernel", type=int, default=None, help="Convolution kernel size.")
    parser.add_argument("--model.channels", type=int, nargs="*", default=None, help="Convolution widths.")
    parser.add_argument("--model.pool", type=int, default=None, help="Pooling window of lenet_lite (1 disables).")

    # Schedule and encryption.
    parser.add_argument("--schedule.rho_syn", type=int, default=None, help="Synthetic rounds per cycle.")
    parser.add_argument("--schedule.rho_tot", type=int, default=None, help="Rounds per cycle.")
    parser.add_argument("--crypto.eta", type=float, default=None, help="Fraction of parameters encrypted.")
    parser.add_argument("--crypto.modulus_bits", type=int, default=None, help="Paillier modulus length.")
    parser.add_argument("--crypto.precision_bits", type=int, default=None, help="Fixed-point precision in bits.")
    parser.add_argument("--crypto.mask_strategy", type=str, choices=["sensitivity", "random"], default=None)
    parser.add_argument("--crypto.sensitivity_batch", type=int, default=None, help="Samples per client.")

    # Local training.
    parser.add_argument("--local.lr", type=float, default=None, help="Local learning rate.")
    parser.add_argument("--local.batch_size", type=int, default=None, help="Local batch size.")
    parser.add_argument("--local.epochs", type=int, default=None, help="Local epochs per round.")

    # Stopping.
    parser.add_argument("--stopping.mode", type=str, choices=["fixed", "convergence"], default=None)
    parser.add_argument("--stopping.rounds", type=int, default=None, help="Rounds in fixed mode.")
    parser.add_argument("--stopping.max_rounds", type=int, default=None, help="Round cap in convergence mode.")
    parser.add_argument("--stopping.window", type=int, default=None, help="Moving-average window.")
    parser.add_argument("--stopping.epsilon", type=float, default=None, help="Improvement threshold (points).")
    parser.add_argument("--stopping.patience", type=int, default=None, help="Non-improving rounds to stop.")

    # Run.
    parser.add_argument("--run.name", type=str, default=None, help="Run directory name.")
    parser.add_argument("--run.seed", type=int, default=None, help="Master seed.")
    parser.add_argument("--run.repetitions", type=int, default=None, help="Repetitions of the experiment.")
    parser.add_argument("--run.workers", type=int, default=None, help="Threads for client rounds.")
    parser.add_argument("--run.output_dir", type=str, default=None, help="Output root (overridden by $HEFL_OUTPUT_ROOT).")
    parser.add_argument("--run.baseline", action="store_true", default=None, help="Mark the run as report baseline.")
    parser.add_argument("--run.snapshot_rounds", type=int, nargs="*", default=None, help="Rounds to snapshot.")
    parser.add_argument("--run.trace_rounds", type=int, nargs="*", default=None, help="Rounds to keep messages of.")

    # Attack.
    parser.add_argument("--attack.source", type=str, choices=["simulated", "uplink"], default=None, help="Updates to attack.")
    parser.add_argument("--attack.optimizer", type=str, choices=["lbfgs", "adam"], default=None, help="Gradient matching optimiser.")
    parser.add_argument("--attack.iterations", type=int, default=None, help="Gradient matching iterations.")
    parser.add_argument("--attack.step", type=float, default=None, help="Initial optimiser step.")
    parser.add_argument("--attack.fd_step", type=float, default=None, help="Finite-difference step.")
    parser.add_argument("--attack.images_per_class", type=int, default=None, help="Victims per class and round.")
    parser.add_argument("--attack.rounds", type=int, nargs="*", default=None, help="Rounds to attack.")
    parser.add_argument("--attack.repetition", type=int, default=None, help="Repetition to attack.")
    parser.add_argument("--attack.baseline_images", type=int, default=None, help="Noise images for the random baseline.")
    parser.add_argument("--attack.workers", type=int, default=None, help="Threads for attacks.")

    # Logging and tracking.
    parser.add_argument("--logging.debug", action="store_true", default=None, help="Log at DEBUG level.")
    parser.add_argument("--logging.trace", action="store_true", default=None, help="Log at TRACE level.")
    parser.add_argument("--logging.record_log", action="store_true", default=None, help="Also log to a file.")
    parser.add_argument("--logging.logging_dir", type=str, default=None, help="Directory of the log file.")
    parser.add_argument("--wandb.on", action="store_true", default=None, help="Track the run with wandb.")
    parser.add_argument("--wandb.project_name", type=str, default=None, help="wandb project.")
    parser.add_argument("--wandb.entity", type=str, default=None, help="wandb entity.")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {dest: value for dest, value in vars(args).items() if "." in dest and value is not None}


def get_config(args: Optional[argparse.Namespace] = None, path: Optional[str] = None) -> ExperimentConfig:
    """
    Builds the experiment configuration: defaults, then the YAML file, then
    the dotted command-line flags.

    Raises:
        ConfigError: When the file cannot be read or a value is invalid.
    """
    path = path or (getattr(args, "config", None) if args is not None else None)
    tree = munch.Munch()
    if path:
        try:
            with open(os.path.expanduser(path), "r") as f:
                tree = munch.munchify(yaml.safe_load(f) or {})
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"config file {path} must hold a mapping of sections")

    if args is not None:
        for dest, value in _overrides(args).items():
            section, key = dest.split(".", 1)
            tree.setdefault(section, munch.Munch())[key] = value
            logger.trace(f"Override {dest}={value}")

    try:
        return ExperimentConfig.parse_obj(munch.unmunchify(tree))
    except pydantic.ValidationError as e:
        raise ConfigError(str(e)) from e
