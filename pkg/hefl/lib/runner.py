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

import copy
from abc import ABC, abstractmethod
from typing import List, Optional

import wandb
from loguru import logger

from hefl.config import ExperimentConfig
from hefl.lib.config import check_config, get_config
from hefl.lib.log import setup_logging


class Runner(ABC):
    """
    Base class of the train, attack and report commands. It resolves and
    checks the configuration, sets up logging and owns the optional wandb run.
    Subclasses implement ``run`` and return the directory they wrote.
    """

    def __init__(self, config: Optional[ExperimentConfig] = None):
        """
        Args:
            config: Parsed configuration; defaults are used when omitted.
        """
        base_config = copy.deepcopy(config or get_config())
        self.config = check_config(base_config)
        setup_logging(self.config.logging)
        logger.debug(f"Resolved config: {self.config.dict()}")
        self.wandb_run = None

    def init_wandb(self, directory: str, name: str, tags: List[str]):
        if not self.config.wandb.on:
            return None
        self.finish_wandb()
        self.wandb_run = wandb.init(
            project=self.config.wandb.project_name,
            entity=self.config.wandb.entity,
            config=self.config.dict(),
            dir=directory,
            name=name,
            tags=tags,
            reinit=True,
        )
        return self.wandb_run

    def log_wandb(self, values: dict):
        if self.wandb_run is not None:
            self.wandb_run.log(values)

    def finish_wandb(self):
        if self.wandb_run is not None:
            self.wandb_run.finish()
            self.wandb_run = None

    @abstractmethod
    def run(self) -> str:
        """
        Executes the command.

        Returns:
            str: The directory holding the command's outputs.
        """
        ...

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.finish_wandb()
