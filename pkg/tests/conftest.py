import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from mfgp import DgpConfig, dgp_model_params, simulate_mf


@pytest.fixture(scope="session")
def small_sim():
    """3x3 lattice, 6 times: fast shared instance for structural tests."""
    return simulate_mf(DgpConfig(grid_side=3, n_times=6, seed=42))


@pytest.fixture(scope="session")
def small_theta(small_sim):
    return dgp_model_params(small_sim.config)


@pytest.fixture(scope="session")
def lattice_sim():
    """Full default lattice (16 stations x 15 times)."""
    return simulate_mf(DgpConfig(seed=7))


@pytest.fixture(scope="session")
def lattice_theta(lattice_sim):
    return dgp_model_params(lattice_sim.config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
