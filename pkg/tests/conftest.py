import numpy as np
import pytest
import yaml

from hefl.config import ExperimentConfig
from hefl.crypto import SchemeParams, keygen
from hefl.data import make_toy_dataset


@pytest.fixture(scope="session")
def small_key():
    return keygen(7, SchemeParams(modulus_bits=512))


@pytest.fixture(scope="session")
def other_key():
    return keygen(8, SchemeParams(modulus_bits=512))


@pytest.fixture
def toy_pool():
    return make_toy_dataset(4, 20, 8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config_dict(output_dir, **sections) -> dict:
    """A federation small enough to train several rounds in a few seconds."""
    tree = {
        "data": {"source": "toy", "toy_classes": 2, "toy_per_class": 12, "toy_test_per_class": 6, "toy_size": 8},
        "federation": {"num_clients": 3, "alpha": 0.5},
        "model": {"name": "mlp", "hidden": [4], "activation": "tanh"},
        "schedule": {"rho_syn": 0, "rho_tot": 1},
        "crypto": {"modulus_bits": 256, "precision_bits": 40, "eta": 0.2},
        "local": {"lr": 0.1, "batch_size": 8, "epochs": 1},
        "stopping": {"mode": "fixed", "rounds": 4},
        "run": {"name": "tiny", "seed": 5, "output_dir": str(output_dir)},
        "logging": {"logging_dir": str(output_dir)},
    }
    for section, values in sections.items():
        tree.setdefault(section, {}).update(values)
    return tree


@pytest.fixture
def tiny_config(tmp_path):
    def _make(**sections) -> ExperimentConfig:
        return ExperimentConfig.parse_obj(tiny_config_dict(tmp_path, **sections))

    return _make


@pytest.fixture
def tiny_tree(tmp_path):
    def _make(**sections) -> dict:
        return tiny_config_dict(tmp_path, **sections)

    return _make


@pytest.fixture
def tiny_config_file(tmp_path, tiny_tree):
    """Writes the tiny configuration to a YAML file and returns its path."""

    def _write(name="config.yaml", **sections) -> str:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(tiny_tree(**sections)))
        return str(path)

    return _write
