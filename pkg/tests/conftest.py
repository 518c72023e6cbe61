import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowpert.flow import DiffusionSchedule, ProbabilityFlow, TimeGrid
from flowpert.gmm import build_benchmark_gmm, single_gaussian, with_weights

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("FLOWPERT_OPTIN") == "1":
        return
    skip = pytest.mark.skip(reason="opt-in; set FLOWPERT_OPTIN=1")
    for item in items:
        if "optin" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def bench10():
    return build_benchmark_gmm(10, seed=0)


@pytest.fixture(scope="session")
def bench5():
    return build_benchmark_gmm(5, seed=0)


def make_flow(gmm, steps, integrator="heun", counter=None):
    return ProbabilityFlow(gmm, DiffusionSchedule(), TimeGrid.uniform(steps), integrator, counter)


@pytest.fixture(scope="session")
def flow10(bench10):
    return make_flow(with_weights(bench10, (0.5, 0.5)), 100)


@pytest.fixture(scope="session")
def flow5(bench5):
    return make_flow(with_weights(bench5, (0.5, 0.5)), 16)


@pytest.fixture(scope="session")
def stationary_flow():
    return make_flow(single_gaussian(np.zeros(3), np.eye(3)), 10)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Append ``[PASS]/[FAIL] criterion ...`` lines; echoed in the terminal summary."""

    def record(number, passed, text):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
