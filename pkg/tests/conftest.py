import math

import numpy as np
import pytest

from heliotower import (
    CavityReceiver,
    CostModel,
    CylindricalReceiver,
    DesignVector,
    LayoutConfig,
    PlantParams,
    clear_sky_insolation,
)


@pytest.fixture(scope="session")
def cost_model():
    return CostModel(c_fixed=2.0e6, c_heliostat=150.0, c_tower=3.0e3, c_receiver=1.5e4)


@pytest.fixture(scope="session")
def plant_params(cost_model):
    return PlantParams(
        sigma_h=2.9,
        l_h=9.0,
        l_v=8.0,
        reflectivity=0.88,
        phi=math.radians(37.5),
        m_n=0.01,
        m_w=0.0,
        eta_cycle=0.38,
        # sized so the small unit-test fields stay feasible
        loss_coeff=8.0,
        cost=cost_model,
    )


@pytest.fixture(scope="session")
def cavity_design():
    return DesignVector(
        a0=5.0, a1=0.03, d_theta=-2.0, e_theta=0.1, epsilon=1.0, delta=0.1,
        b=0.05, d0_1=16.0,
        receiver=CavityReceiver(h_t=120.0, r=10.0, e_l=0.5),
    )


@pytest.fixture(scope="session")
def cylindrical_design():
    return DesignVector(
        a0=4.0, a1=0.03, d_theta=-2.0, e_theta=0.05, epsilon=1.0, delta=0.1,
        b=0.04, d0_1=14.0,
        receiver=CylindricalReceiver(h_t=120.0, r=8.0, h_r=9.0),
    )


@pytest.fixture(scope="session")
def small_config():
    # small field for fast unit tests
    return LayoutConfig(r_base=75.0, r_min=8.0, d_min=10.0, n_hel=120, n_overgen=1.5)


@pytest.fixture(scope="session")
def small_insolation(plant_params):
    # three samples per day keep the optical stage cheap in unit tests
    return clear_sky_insolation(plant_params.phi, hours=(8.0, 10.0, 12.0, 14.0, 16.0))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260811)
