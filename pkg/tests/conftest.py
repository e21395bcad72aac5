"""Shared fixtures: a small hand-built dataset and a simulated Hawkes run."""

import numpy as np
import pytest

from glppm.data import DriverChannel, DriverSeries, EventSeries
from glppm.likelihood import linear_link
from glppm.simulator import SimSpec, simulate


@pytest.fixture
def tiny():
    """Two-channel dataset small enough to check against hand sums.

    Exogenous driver "z" with three marked jumps plus the self-exciting
    target channel, horizon 8.
    """
    events = EventSeries(8.0, np.array([1.5, 3.0, 6.5]))
    drivers = DriverSeries(
        8.0,
        (
            DriverChannel("z", np.array([0.5, 2.0, 5.0]), np.array([1.0, 0.5, 2.0])),
            DriverChannel("target", events.times, np.ones(3)),
        ),
    )
    return events, drivers


@pytest.fixture(scope="session")
def hawkes50():
    """Linear self-exciting run: baseline 0.5, filter 0.3 exp(-u), horizon 50."""
    spec = SimSpec(
        link=linear_link(0.5),
        filters=[lambda u: 0.3 * np.exp(-u)],
        horizon=50.0,
    )
    return simulate(spec, seed=0)
