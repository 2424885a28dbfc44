"""Shared fixtures: a small synthetic history and a quickly trained model.

The expensive, desk-scale artifacts used by the acceptance gate live in
test_acceptance.py; everything here is sized for sub-second reuse.
"""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from volwmc import (VaeConfig, chronological_split, synthetic_history,
                    train_vae)

settings.register_profile(
    "volwmc",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("volwmc")


@pytest.fixture(scope="session")
def tiny_history():
    """120 synthetic days, enough to exercise splits and training loops."""
    return synthetic_history(120, seed=3)


@pytest.fixture(scope="session")
def tiny_split(tiny_history):
    return chronological_split(tiny_history, train_fraction=0.7,
                               n_validation=12, seed=0)


@pytest.fixture(scope="session")
def tiny_vae(tiny_split):
    """A d=2 model trained just long enough to be usable, not accurate."""
    train, val, _ = tiny_split
    config = VaeConfig(latent_dim=2, hidden=(8, 8), epochs=250, patience=250,
                       restarts=1, seed=0)
    model, report = train_vae(train, val, config)
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
