"""
conftest.py

https://docs.pytest.org/en/latest/fixture.html
"""

import sys
sys.path.insert(0, "../..")

import pytest

from fediot.models import data_model
from fediot.models.federation_model import FederationConfig
from fediot.models.nn_model import AutoencoderConfig, LrSchedule

N_SMALL_FEATURES = 12
SMALL_SIZES = {"train_rows": 300, "eval_rows": 150, "attack_rows": 30}

def small_corpus(n_devices, seed=7):
    return data_model.generate_synthetic_corpus(
        n_devices, seed, n_features=N_SMALL_FEATURES, benign_rows=900,
        attack_rows_per_type=60, shifted_features=4
    )

def small_devices(n_devices, seed=7):
    datasets, _ = data_model.prepare_datasets(small_corpus(n_devices, seed), seed, **SMALL_SIZES)
    return datasets

def federation_config(n_clients, total_rounds=2, local_epochs=1, **kwargs):
    return FederationConfig(
        n_clients=n_clients, total_rounds=total_rounds, local_epochs=local_epochs,
        batch_size=kwargs.pop("batch_size", 64),
        schedule=LrSchedule(eta_max=1e-3, eta_min=0.0, total_rounds=total_rounds), **kwargs
    )

@pytest.fixture(scope="session")
def toy_config():
    """2 -> 1 -> 2, seven parameters"""
    return AutoencoderConfig(input_dim=2, encoder_rates=(0.5,), seed=3)

@pytest.fixture(scope="session")
def small_config():
    return AutoencoderConfig(input_dim=N_SMALL_FEATURES, seed=11)

@pytest.fixture(scope="session")
def three_devices():
    return small_devices(3)

@pytest.fixture(scope="session")
def nine_devices():
    return small_devices(9)

@pytest.fixture(scope="function")
def workdir(tmp_path, monkeypatch):
    """An empty data root and output directory"""
    data_root = tmp_path / "data"
    output_dir = tmp_path / "runs"
    data_root.mkdir()
    output_dir.mkdir()
    monkeypatch.chdir(tmp_path)
    return {"data_root": str(data_root), "output_dir": str(output_dir), "tmp": tmp_path}
