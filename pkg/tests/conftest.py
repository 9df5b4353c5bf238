import os
import sys

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _ROOT not in sys.path:
    sys.path.insert(0, _ROOT)

import numpy as np
import pytest

from adm.adm import train_adm
from dynamics.dynamics import SimConfig, equilibrium_state
from grid_model.grid_model import load_case
from ingest.ingest import synthetic_loads

# Desk-scale settings shared by the attack and experiment tests
DESK_SIM = SimConfig(dt=0.05, horizon=600, lfc_period=20)
DESK_SYNTHETIC = {"days": 7, "samples_per_day": 144, "daily_amplitude": 0.4, "noise_sigma": 0.002}
DESK_ADM_EPS = 0.03
DESK_SEED = 7


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-solve experiment checks")


@pytest.fixture(scope="module")
def case3():
    return load_case("case3")


@pytest.fixture(scope="module")
def case39():
    return load_case("case39")


@pytest.fixture(scope="module")
def desk_sim():
    return DESK_SIM


@pytest.fixture(scope="module")
def benign(case3):
    return case3.base_loads


@pytest.fixture(scope="module")
def initial(case3):
    return equilibrium_state(case3)


@pytest.fixture(scope="module")
def training_series(case3):
    series = synthetic_loads(case3, DESK_SYNTHETIC, DESK_SEED)
    return {bus: s.values for bus, s in series.items()}


@pytest.fixture(scope="module")
def desk_adm(training_series):
    return train_adm(training_series, eps=DESK_ADM_EPS, min_pts=4, lookback=1)


@pytest.fixture(scope="module")
def seeded_adm(case3):
    """Trains the clustering detector on the synthetic history of a given seed"""
    def train(seed):
        series = synthetic_loads(case3, DESK_SYNTHETIC, seed)
        return train_adm({bus: s.values for bus, s in series.items()}, eps=DESK_ADM_EPS, min_pts=4, lookback=1)
    return train


@pytest.fixture
def rng():
    return np.random.default_rng(0)
