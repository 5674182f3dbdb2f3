import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from protoope.mdp import TabularMdp

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def chain_mdp() -> TabularMdp:
    """s0: action 0 stays (reward 0), action 1 enters terminal s1 (+1)."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    return TabularMdp(P, np.array([0.0, 1.0]), np.array([False, True]), np.array([1.0, 0.0]))


def symmetric_mdp() -> TabularMdp:
    """One start state; action 0 leads to +1, action 1 to -1."""
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    return TabularMdp(P, np.array([0.0, 1.0, -1.0]), np.array([False, True, True]), np.array([1.0, 0.0, 0.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def full_runs() -> bool:
    return os.environ.get("PROTOOPE_FULL", "") not in ("", "0")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
