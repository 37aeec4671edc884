import numpy as np
import pytest

from amod.config import BehaviorParams, DemandProfile, NetworkConfig


def make_network(K=2, fleet=300.0, tau=None, floor=15.0, cap=None, **kw):
    if tau is None:
        tau = np.full((K, K), 10.0)
        np.fill_diagonal(tau, 5.0)
    cap = np.full(K, fleet) if cap is None else cap
    return NetworkConfig(travel_time=tau, fleet_size=fleet, parking_cap=cap, idle_floor=floor, **kw)


def make_behavior(K=2, eps=0.1, alpha=0.5, cancel=(0.0, 0.1, -0.05), beta=0.2, theta=0.5, kappa=1.0):
    return BehaviorParams(eps, alpha, cancel, np.full(K, beta), np.full(K, theta), kappa)


def flat_profile(K=2, rate=1.0, buckets=288):
    return DemandProfile(np.full((buckets, K, K), float(rate)))


@pytest.fixture(scope="session")
def city():
    from amod.scenario import load_default
    return load_default()


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
