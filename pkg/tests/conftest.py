from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ereem_lab.nv_model import BiasField, SpeciesConstants

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def n15():
    return SpeciesConstants.n15()


@pytest.fixture(scope="session")
def n14():
    return SpeciesConstants.n14()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def field(B, theta_deg):
    return BiasField.from_degrees(B, theta_deg)
