"""Fixtures for the long-running acceptance sweeps.

Sweep sizes come from the environment so CI can shorten them:
BLMAC_SWEEP_CASES (default 200) and BLMAC_CODEC_CASES (default 1000).
"""

import os

import numpy as np
import pytest

from blmac_sim.config import CONFIG_DIR
from blmac_sim.network import NetworkConfig, load_network


@pytest.fixture(scope="session")
def sweep_cases() -> int:
    return int(os.environ.get("BLMAC_SWEEP_CASES", "200"))


@pytest.fixture(scope="session")
def codec_cases() -> int:
    return int(os.environ.get("BLMAC_CODEC_CASES", "1000"))


@pytest.fixture(scope="session")
def tinyyolo() -> NetworkConfig:
    return load_network(CONFIG_DIR / "tinyyolo.yaml")


@pytest.fixture
def sweep_rng() -> np.random.Generator:
    return np.random.default_rng(int(os.environ.get("BLMAC_SWEEP_SEED", "7")))
