import math

import pytest
from hypothesis import settings

from rwtree.env_model import BetaRho, Deterministic, EnvSpec, Offspring, TwoPoint

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

LOG2 = math.log(2.0)


@pytest.fixture
def very_slow():
    return EnvSpec.binary(Deterministic(2 * LOG2))


@pytest.fixture
def boundary():
    return EnvSpec.binary(BetaRho(3.0, 1.0))


@pytest.fixture
def kappa2():
    return EnvSpec.binary(BetaRho(5.0, 2.0))


@pytest.fixture
def two_point_kappa2():
    return EnvSpec.binary(TwoPoint(math.log(3.0), -LOG2, 0.9))


@pytest.fixture
def shallow():
    """nu = 2, omega = log 2 everywhere: rho = 2/3 at every vertex."""
    return EnvSpec.binary(Deterministic(LOG2))


@pytest.fixture
def dying():
    """P(nu=0)=1/4, P(nu=2)=1/4, P(nu=3)=1/2: extinction probability (sqrt(17)-3)/4."""
    return EnvSpec(Offspring((0.25, 0.0, 0.25, 0.5)), BetaRho(3.0, 1.0))


# -- acceptance verdict lines --------------------------------------------


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")
    config._acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, name: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}"
        request.config._acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: float(s.split("criterion ")[1].split(":")[0].rstrip("ab"))):
            terminalreporter.write_line(line)
