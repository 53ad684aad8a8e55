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

from typing import List, Literal, Optional

import pydantic
import yaml

from hefl.analysis import ConvergenceRule
from hefl.crypto import SchemeParams
from hefl.protocol import LocalHyperparams, RoundSchedule


class Section(pydantic.BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True


class DataConfig(Section):
    source: Literal["toy", "cifar10"] = pydantic.Field(
        "toy",
        title="source",
        description="Dataset to train on: the generated toy task or CIFAR-10 binary batches.",
    )
    cifar10_dir: Optional[str] = pydantic.Field(
        None,
        title="cifar10_dir",
        description="Directory holding data_batch_1..5.bin and test_batch.bin.",
    )
    toy_classes: int = pydantic.Field(4, ge=2)
    toy_per_class: int = pydantic.Field(60, ge=2, description="Training samples per class.")
    toy_test_per_class: int = pydantic.Field(25, ge=1)
    toy_size: int = pydantic.Field(8, ge=8, description="Side of the square toy images.")
    toy_channels: int = pydantic.Field(1, ge=1)
    toy_noise: float = pydantic.Field(0.1, ge=0)


class FederationConfig(Section):
    num_clients: int = pydantic.Field(3, ge=1)
    alpha: float = pydantic.Field(0.5, gt=0, description="Dirichlet concentration of the authentic split.")


class ModelConfig(Section):
    name: Literal["mlp", "lenet_lite"] = "mlp"
    hidden: List[int] = pydantic.Field([32], description="Dense hidden widths.")
    activation: Literal["sigmoid", "tanh", "relu"] = "tanh"
    kernel: int = pydantic.Field(5, ge=1, description="Convolution kernel of lenet_lite.")
    channels: List[int] = pydantic.Field([6, 16], description="Convolution widths of lenet_lite.")
    pool: int = pydantic.Field(2, ge=1, description="Average-pooling window after each convolution of lenet_lite; 1 disables pooling.")


class ScheduleConfig(RoundSchedule):
    class Config:
        extra = "forbid"


class LocalConfig(LocalHyperparams):
    class Config:
        extra = "forbid"


class CryptoConfig(SchemeParams):
    eta: float = pydantic.Field(0.2, ge=0, le=1, description="Fraction of parameters sent encrypted.")
    mask_strategy: Literal["sensitivity", "random"] = "sensitivity"
    sensitivity_batch: int = pydantic.Field(32, ge=1, description="Samples per client for the sensitivity mask.")

    class Config:
        extra = "forbid"


class StoppingConfig(ConvergenceRule):
    mode: Literal["fixed", "convergence"] = "fixed"
    rounds: int = pydantic.Field(100, ge=1, description="Rounds to run in fixed mode.")
    max_rounds: int = pydantic.Field(200, ge=1, description="Upper bound on rounds in convergence mode.")

    class Config:
        extra = "forbid"

    def rule(self) -> ConvergenceRule:
        return ConvergenceRule(window=self.window, epsilon=self.epsilon, patience=self.patience)


class RunConfig(Section):
    name: str = "run"
    seed: int = pydantic.Field(0, ge=0)
    repetitions: int = pydantic.Field(1, ge=1)
    workers: int = pydantic.Field(1, ge=1, description="Threads used for client rounds.")
    output_dir: str = "~/.hefl/runs"
    baseline: bool = pydantic.Field(False, description="Marks this run as the report baseline.")
    snapshot_rounds: List[int] = pydantic.Field([], description="Rounds after which the global model is saved.")
    trace_rounds: List[int] = pydantic.Field([], description="Rounds whose serialized messages are saved for attacks.")


class AttackConfig(Section):
    source: Literal["simulated", "uplink"] = pydantic.Field(
        "simulated",
        description="simulated: single-image updates replayed from the broadcast model; uplink: the saved client replies.",
    )
    optimizer: Literal["lbfgs", "adam"] = "lbfgs"
    iterations: int = pydantic.Field(500, ge=0)
    step: float = pydantic.Field(0.05, gt=0)
    fd_step: float = pydantic.Field(1e-4, gt=0)
    images_per_class: int = pydantic.Field(10, ge=1)
    rounds: Optional[List[int]] = pydantic.Field(None, description="Rounds to attack; None means every traced round.")
    repetition: int = pydantic.Field(0, ge=0)
    baseline_images: int = pydantic.Field(10, ge=0, description="Noise images scored for the random baseline.")
    workers: int = pydantic.Field(1, ge=1)


class LoggingConfig(Section):
    debug: bool = False
    trace: bool = False
    record_log: bool = False
    logging_dir: str = "~/.hefl/logs"


class WandbConfig(Section):
    on: bool = False
    project_name: Optional[str] = None
    entity: Optional[str] = None


class ExperimentConfig(pydantic.BaseModel):
    """
    Complete description of an experiment. Every section is validated before
    any work starts; unknown keys are rejected.

    Example:
        config = ExperimentConfig.parse_obj({"schedule": {"rho_syn": 1, "rho_tot": 2}})
        config.crypto.eta  # 0.2
    """

    data: DataConfig = DataConfig()
    federation: FederationConfig = FederationConfig()
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    crypto: CryptoConfig = CryptoConfig()
    local: LocalConfig = LocalConfig()
    stopping: StoppingConfig = StoppingConfig()
    run: RunConfig = RunConfig()
    attack: AttackConfig = AttackConfig()
    logging: LoggingConfig = LoggingConfig()
    wandb: WandbConfig = WandbConfig()

    class Config:
        extra = "forbid"
        validate_assignment = True

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.parse_obj(yaml.safe_load(text) or {})
