"""
Test configuration and fixtures.
"""

import os
from typing import Any, Dict

import pytest

from dtskit.config import RunConfig, load_config
from dtskit.data import DomainPair, generate_pair
from dtskit.log import configure_logging
from dtskit.numerics import Rng
from dtskit.schedule import NoiseSchedule, linear_schedule

# Small enough that a full pipeline run takes seconds.
TINY_OVERRIDES: Dict[str, Any] = {
    "seed": 0,
    "data": {"n_source": 200, "n_target": 40},
    "schedule": {"steps": 20},
    "denoiser": {"hidden": [16, 16], "time_dim": 8},
    "cdpm": {
        "steps": 150,
        "batch_size": 32,
        "average_window": 20,
        "patience": 50,
        "log_every": 50,
    },
    "uda": {
        "steps": 60,
        "batch_size": 16,
        "transform_hidden": [8],
        "feature_dim": 4,
        "discriminator_hidden": [8],
        "log_every": 20,
    },
    "solver": {"steps": 5},
    "dts": {"n_generated_per_class": 10},
    "metrics": {"adist_steps": 50},
    "sweep": {"counts": [0, 2], "seeds": [0, 1]},
}

TINY_CONFIG_TEXT = """\
seed = 0
data.n_source = 200
data.n_target = 40
schedule.steps = 20
denoiser.hidden = [16, 16]
denoiser.time_dim = 8
cdpm.steps = 150
cdpm.batch_size = 32
cdpm.average_window = 20
cdpm.patience = 50
cdpm.log_every = 50
uda.steps = 60
uda.batch_size = 16
uda.transform_hidden = [8]
uda.feature_dim = 4
uda.discriminator_hidden = [8]
uda.log_every = 20
solver.steps = 5
dts.n_generated_per_class = 10
metrics.adist_steps = 50
"""


@pytest.fixture(scope="session", autouse=True)
def quiet_logging():
    """Route structlog through stderr before any logger is first used."""
    configure_logging("WARNING", "console")


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Drop DTSKIT_* variables so tests see only their own configuration."""
    for key in list(os.environ):
        if key.upper().startswith("DTSKIT_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture
def rng() -> Rng:
    return Rng(0, "test")


@pytest.fixture
def schedule() -> NoiseSchedule:
    return linear_schedule(200, 1e-4, 0.05)


@pytest.fixture
def tiny_config() -> RunConfig:
    return load_config(overrides=TINY_OVERRIDES)


@pytest.fixture
def tiny_pair(tiny_config) -> DomainPair:
    return generate_pair(tiny_config.shift_spec())
