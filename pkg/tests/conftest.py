"""Shared fixtures; the expensive trained twist is session-scoped."""

import numpy as np
import pytest

from twistsmc import QuadraticTwist, RngStream, train_twist
from twistsmc.lgssm import LGSSMParams, generate_data, lgssm_model

TWIST_TRAIN_STEPS = 300_000
TWIST_BATCH = 32


def twist_lr_schedule(step: int) -> float:
    # Constant 1e-3 with a 0.3x decay after 100k updates.
    return 1e-3 if step < 100_000 else 3e-4


@pytest.fixture(scope="session")
def lgssm10():
    params = LGSSMParams(1.0, 1.0, 10)
    model = lgssm_model(params)
    _, y = generate_data(params, RngStream(2024))
    return params, model, y


@pytest.fixture(scope="session")
def trained_twist_t10(lgssm10):
    """Density-ratio-trained quadratic twist for the horizon-10 model."""
    params, model, _ = lgssm10
    twist = QuadraticTwist.default_init(params.horizon)
    history = train_twist(
        model,
        twist,
        steps=TWIST_TRAIN_STEPS,
        rng=RngStream(5150),
        lr=1e-3,
        batch_size=TWIST_BATCH,
        lr_schedule=twist_lr_schedule,
        record_every=10_000,
    )
    assert np.all(np.isfinite(history.losses))
    return twist
